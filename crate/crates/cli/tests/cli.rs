use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use mmfilter::simenv::{generate_dataset, GenerateSpec, Task, TrajectoryDataset};
use mmfilter::trainer::Checkpoint;
use sha2::{Digest, Sha256};

const TINY: &str = r#"
seed = 1

[net]
width = 8
encoder_layers = 1
trunk_layers = 1
lstm_width = 8

[train]
schedule = [2, 4]
epochs_per_stage = 2
batches_per_epoch = 2
batch_size = 4
dynamics_epochs = 1
measurement_epochs = 1
particles = 8
eval_particles = 16
validation_trajectories = 2
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mmfilter"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn setup(traj: usize, steps: usize, blackout: f64) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(
        dir.path(),
        &[
            "generate",
            "--traj",
            &traj.to_string(),
            "--steps",
            &steps.to_string(),
            "--blackout",
            &blackout.to_string(),
            "--seed",
            "3",
            "--out",
            "data/train.dfds",
        ],
    );
    ok(
        dir.path(),
        &[
            "generate",
            "--traj",
            "3",
            "--steps",
            "20",
            "--blackout",
            "0.4",
            "--seed",
            "4",
            "--out",
            "data/test.dfds",
        ],
    );
    dir
}

fn sha(path: &Path) -> String {
    Sha256::digest(fs::read(path).unwrap())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn check_manifest(dir: &Path) {
    let text = fs::read_to_string(dir.join("manifest.sha256")).unwrap();
    assert!(!text.is_empty());
    for line in text.lines() {
        let (hash, name) = line.split_once("  ").unwrap();
        assert_eq!(hash, sha(&dir.join(name)), "{name}");
    }
}

#[test]
fn generate_echoes_flags_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "generate",
        "--task",
        "push",
        "--traj",
        "40",
        "--steps",
        "120",
        "--blackout",
        "0.4",
        "--seed",
        "7",
        "--out",
        "a/push.dfds",
    ];
    let summary = ok(dir.path(), &args);
    let data = TrajectoryDataset::load(dir.path().join("a/push.dfds")).unwrap();
    let h = &data.header;
    assert_eq!(
        (h.task, h.n_traj, h.n_steps, h.blackout_prob, h.seed),
        (Task::Push, 40, 120, 0.4, 7)
    );
    let first = fs::read(dir.path().join("a/push.dfds")).unwrap();
    assert_eq!(ok(dir.path(), &args), summary);
    assert_eq!(fs::read(dir.path().join("a/push.dfds")).unwrap(), first);

    let blackout: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("blackout fraction "))
        .unwrap()
        .parse()
        .unwrap();
    // 4800 Bernoulli(0.4) frames: the standard deviation is 0.007.
    assert!((blackout - 0.4).abs() < 0.03, "{blackout}");
    let sidecar = fs::read_to_string(dir.path().join("a/push.dfds.sha256")).unwrap();
    assert_eq!(
        sidecar,
        format!("{}  push.dfds\n", sha(&dir.path().join("a/push.dfds")))
    );
    assert!(summary.contains(&format!("sha256 {}", sha(&dir.path().join("a/push.dfds")))));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = setup(4, 10, 0.0);
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    fs::write(d.join("sweep.toml"), "[sweep]\nblackouts = [2.0]\n").unwrap();
    let cases: &[&[&str]] = &[
        &[],
        &["frobnicate"],
        &["generate", "--traj", "3"],
        &["generate", "--traj", "x", "--out", "x.dfds"],
        &["generate", "--blackout", "1.5", "--out", "x.dfds"],
        &["generate", "--task", "juggle", "--out", "x.dfds"],
        &[
            "train",
            "--config",
            "bad.toml",
            "--data",
            "data/train.dfds",
            "--out",
            "r",
        ],
        &[
            "train",
            "--config",
            "missing.toml",
            "--data",
            "data/train.dfds",
            "--out",
            "r",
        ],
        &[
            "train",
            "--arch",
            "kalman",
            "--data",
            "data/train.dfds",
            "--out",
            "r",
        ],
        &["train", "--data", "data/train.dfds"],
        &["train", "--out", "r"],
        &["train", "--resume", "--init", "a.dfck", "--out", "r"],
        &["eval", "--data", "data/test.dfds"],
        &["sweep", "--config", "sweep.toml", "--out", "s"],
    ];
    for args in cases {
        let out = run(d, args);
        assert_eq!(
            code(&out),
            1,
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
    assert_eq!(code(&run(d, &["--help"])), 0);
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = setup(6, 12, 0.0);
    let d = dir.path();
    let out = run(d, &["train", "--data", "data/missing.dfds", "--out", "r"]);
    assert_eq!(code(&out), 2);
    fs::write(d.join("junk.dfck"), "not a checkpoint").unwrap();
    let out = run(
        d,
        &[
            "eval",
            "--checkpoint",
            "junk.dfck",
            "--data",
            "data/test.dfds",
        ],
    );
    assert_eq!(code(&out), 2);
    let out = run(d, &["train", "--resume", "--out", "nowhere"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));

    ok(
        d,
        &[
            "pretrain",
            "--config",
            "tiny.toml",
            "--arch",
            "lstm",
            "--data",
            "data/train.dfds",
            "--out",
            "lstm",
        ],
    );
    let out = run(
        d,
        &[
            "pretrain",
            "--stage",
            "dynamics",
            "--config",
            "tiny.toml",
            "--arch",
            "lstm",
            "--data",
            "data/train.dfds",
            "--out",
            "lstm2",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no dynamics model"));
}

#[test]
fn pipeline_trains_evaluates_and_traces() {
    let dir = setup(8, 24, 0.4);
    let d = dir.path();
    let base = ["--config", "tiny.toml", "--data", "data/train.dfds"];
    let with = |extra: &[&'static str]| -> Vec<&str> {
        let mut v: Vec<&str> = extra.to_vec();
        v.extend(base);
        v
    };
    ok(
        d,
        &with(&[
            "pretrain",
            "--stage",
            "dynamics",
            "--arch",
            "crossmodal-pf",
            "--out",
            "pf",
        ]),
    );
    let text = ok(
        d,
        &with(&[
            "pretrain",
            "--stage",
            "measurement",
            "--init",
            "pf/pretrained.dfck",
            "--out",
            "pf",
        ]),
    );
    assert!(text.contains("measurement"));
    assert!(d.join("pf/loss-pretrain-dynamics.csv").exists());
    assert!(d.join("pf/loss-pretrain-measurement.csv").exists());
    ok(
        d,
        &with(&["train", "--init", "pf/pretrained.dfck", "--out", "pf"]),
    );
    for kind in ["crossmodal-ekf", "lstm"] {
        ok(d, &with(&["train", "--arch", kind, "--out", kind]));
        check_manifest(&d.join(kind));
        let log = fs::read_to_string(d.join(kind).join("loss-train.csv")).unwrap();
        assert_eq!(log.lines().count(), 1 + 4, "{log}");
    }
    check_manifest(&d.join("pf"));
    let conflict = run(
        d,
        &with(&[
            "train",
            "--arch",
            "lstm",
            "--init",
            "pf/pretrained.dfck",
            "--out",
            "x",
        ]),
    );
    assert_eq!(code(&conflict), 1);

    let eval = [
        "eval",
        "--compare",
        "pf/model.dfck",
        "crossmodal-ekf/model.dfck",
        "lstm/model.dfck",
        "--data",
        "data/test.dfds",
        "--baselines",
        "--out",
        "eval",
    ];
    let table = ok(d, &eval);
    let compare = fs::read_to_string(d.join("eval/compare.txt")).unwrap();
    let head: Vec<&str> = compare.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(
        head,
        [
            "trajectory",
            "model",
            "model",
            "model",
            "static",
            "dead-reckoning"
        ]
    );
    assert_eq!(compare.lines().count(), 1 + 3 + 1);
    let first = fs::read(d.join("eval/report-static.csv")).unwrap();
    assert_eq!(ok(d, &eval), table);
    assert_eq!(fs::read(d.join("eval/report-static.csv")).unwrap(), first);
    check_manifest(&d.join("eval"));

    ok(
        d,
        &[
            "trace",
            "--checkpoint",
            "pf/model.dfck",
            "--data",
            "data/test.dfds",
            "--traj",
            "1",
            "--frame",
            "5",
            "--out",
            "trace",
        ],
    );
    let test = TrajectoryDataset::load(d.join("data/test.dfds")).unwrap();
    let traj = &test.trajectories[1];
    let csv = fs::read_to_string(d.join("trace/trace-1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + traj.len());
    let grid = fs::read_to_string(d.join("trace/likelihood-1-t5-m1.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 41 * 41);
    let first_row: Vec<f64> = grid
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert!((first_row[0] + 0.2).abs() < 1e-12 && (first_row[1] + 0.2).abs() < 1e-12);
    let svg = fs::read_to_string(d.join("trace/beta-1.svg")).unwrap();
    let mut shaded = vec![false; traj.len()];
    for rect in svg.split("class=\"contact\"").skip(1) {
        let attr = |name: &str| -> usize {
            let rest = &rect[rect.find(&format!("{name}=\"")).unwrap() + name.len() + 2..];
            rest[..rest.find('"').unwrap()].parse().unwrap()
        };
        for t in attr("data-start")..attr("data-end") {
            shaded[t] = true;
        }
    }
    let contact: Vec<bool> = (0..traj.len()).map(|t| traj.contact(t)).collect();
    assert_eq!(shaded, contact);
    assert!(d.join("trace/likelihood-1-t5-m2.svg").exists());
    check_manifest(&d.join("trace"));

    let out = run(
        d,
        &[
            "trace",
            "--checkpoint",
            "lstm/model.dfck",
            "--data",
            "data/test.dfds",
            "--out",
            "t2",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("crossmodal"));
}

fn long_config(d: &Path) -> PathBuf {
    let text = TINY.replace(
        "epochs_per_stage = 2",
        "epochs_per_stage = 40\npatience = 1000",
    );
    let p = d.join("long.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn interrupted_training_resumes_to_the_same_model() {
    let dir = setup(8, 16, 0.0);
    let d = dir.path();
    long_config(d);
    let args = |out: &'static str| -> Vec<&'static str> {
        vec![
            "train",
            "--config",
            "long.toml",
            "--data",
            "data/train.dfds",
            "--out",
            out,
        ]
    };
    ok(d, &args("full"));

    let mut child = bin()
        .current_dir(d)
        .args(args("cut"))
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    let last = d.join("cut/last.dfck");
    let mut killed = false;
    while start.elapsed() < Duration::from_secs(120) {
        if child.try_wait().unwrap().is_some() {
            break;
        }
        if last.exists() {
            std::thread::sleep(Duration::from_millis(30));
            child.kill().unwrap();
            killed = true;
            break;
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    child.wait().unwrap();
    assert!(killed, "training finished before a checkpoint appeared");
    let partial = Checkpoint::load(&last).unwrap();
    let finished = Checkpoint::load(d.join("full/last.dfck")).unwrap();
    assert!(partial.meta.epoch < finished.meta.epoch);
    assert!(!d.join("cut/model.dfck").exists());
    ok(d, &["train", "--resume", "--out", "cut"]);
    assert_eq!(
        fs::read(d.join("cut/model.dfck")).unwrap(),
        fs::read(d.join("full/model.dfck")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(d.join("cut/loss-train.csv")).unwrap(),
        fs::read_to_string(d.join("full/loss-train.csv")).unwrap()
    );
}

#[test]
fn divergence_saves_the_last_good_step() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    let mut data = generate_dataset(
        &GenerateSpec {
            task: Task::Push,
            n_traj: 6,
            n_steps: 12,
            blackout_prob: 0.0,
            seed: 1,
        },
        1,
    )
    .unwrap();
    for t in &mut data.trajectories {
        t.states.iter_mut().for_each(|v| *v = f32::NAN);
    }
    data.save(d.join("nan.dfds")).unwrap();
    let out = run(
        d,
        &[
            "train",
            "--config",
            "tiny.toml",
            "--data",
            "nan.dfds",
            "--out",
            "r",
        ],
    );
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("diverged") && err.contains("last-good.dfck"),
        "{err}"
    );
    let ckpt = Checkpoint::load(d.join("r/last-good.dfck")).unwrap();
    assert!(ckpt.params.flatten().iter().all(|v| v.is_finite()));
    assert!(!d.join("r/model.dfck").exists());
    check_manifest(&d.join("r"));
}

#[test]
fn sweep_output_does_not_depend_on_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let text = format!(
        "{}\n[sweep]\narchs = [\"crossmodal-ekf\", \"lstm\"]\nblackouts = [0.0, 0.8]\ntraj = 6\nsteps = 20\ntest_traj = 2\n",
        TINY
    );
    fs::write(d.join("sweep.toml"), text).unwrap();
    let a = ok(d, &["sweep", "--config", "sweep.toml", "--out", "s1"]);
    let b = ok(
        d,
        &[
            "--jobs",
            "3",
            "sweep",
            "--config",
            "sweep.toml",
            "--out",
            "s2",
        ],
    );
    assert_eq!(a, b);
    for f in [
        "sweep.csv",
        "sweep.txt",
        "lstm-b80.dfck",
        "crossmodal-ekf-b00.dfck",
    ] {
        assert!(
            fs::read(d.join("s1").join(f)).unwrap() == fs::read(d.join("s2").join(f)).unwrap(),
            "{f}"
        );
    }
    let csv = fs::read_to_string(d.join("s1/sweep.csv")).unwrap();
    // Four cells, each with two trajectories and a mean row.
    assert_eq!(csv.lines().count(), 1 + 4 * 3);
    check_manifest(&d.join("s1"));
}
