use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use mmfilter::frames::Frames;
use mmfilter::fusion::{ArchKind, Architecture, GridSpec, Initial};
use mmfilter::parallel::map_indexed;
use mmfilter::simenv::{generate_dataset, GenerateSpec, TrajectoryDataset};
use mmfilter::trainer::{
    dead_reckoning, evaluate, pretrain_dynamics, pretrain_measurement, report_table,
    static_baseline, stream, train_end_to_end, Checkpoint, EvalOptions, EvalReport, LossPoint,
    TrainConfig, TrainMeta, TrainState,
};
use mmfilter::FilterError;

use crate::config::ExperimentConfig;
use crate::manifest::{file_hash, write_manifest};
use crate::plot;
use crate::{EvalArgs, GenerateArgs, RunArgs, Stage, SweepArgs, TraceArgs, UsageError};

pub const CONFIG_FILE: &str = "config.toml";
pub const PRETRAINED: &str = "pretrained.dfck";
pub const MODEL: &str = "model.dfck";
pub const LAST: &str = "last.dfck";
pub const LAST_GOOD: &str = "last-good.dfck";
pub const TRAIN_LOG: &str = "loss-train.csv";

const LOG_HEADER: &str = "phase,epoch,loss,validation\n";
const MODALITY_LABELS: [&str; 2] = ["image", "force/proprio"];

fn load_dataset(path: &Path) -> anyhow::Result<TrajectoryDataset> {
    TrajectoryDataset::load(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

/// Writes through a temporary file so an interrupted save never truncates `path`.
fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    ckpt.save(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn log_line(p: &LossPoint) -> String {
    let v = p.validation.map_or(String::new(), |v| format!("{v}"));
    format!("{},{},{},{v}\n", p.phase, p.epoch, p.loss)
}

fn write_log(path: &Path, curve: &[LossPoint]) -> anyhow::Result<()> {
    let mut s = String::from(LOG_HEADER);
    for p in curve {
        s.push_str(&log_line(p));
    }
    fs::write(path, s)?;
    Ok(())
}

fn append(path: &Path, text: &str) -> anyhow::Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn generate(args: &GenerateArgs, jobs: usize) -> anyhow::Result<()> {
    let spec = GenerateSpec {
        task: args.task,
        n_traj: args.traj,
        n_steps: args.steps,
        blackout_prob: args.blackout,
        seed: args.seed,
    };
    let data = generate_dataset(&spec, jobs)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    data.save(&args.out)?;
    let hash = file_hash(&args.out)?;
    let name = args
        .out
        .file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let mut sidecar = args.out.clone().into_os_string();
    sidecar.push(".sha256");
    fs::write(&sidecar, format!("{hash}  {name}\n"))?;
    let stats = data.stats();
    println!(
        "task {}, {} trajectories x {} steps, blackout {}, seed {}",
        spec.task.name(),
        spec.n_traj,
        spec.n_steps,
        spec.blackout_prob,
        spec.seed
    );
    println!("frames {}", stats.frames);
    println!("contact fraction {:.4}", stats.contact_fraction);
    println!("blackout fraction {:.4}", stats.blackout_fraction);
    println!("sha256 {hash}");
    Ok(())
}

/// Experiment settings from `--config` with command-line overrides applied.
fn experiment(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut exp = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(a) = args.arch {
        exp.arch = a;
    }
    if let Some(d) = &args.data {
        exp.train_data = Some(d.clone());
    }
    if let Some(s) = args.seed {
        exp.seed = s;
    }
    if let Some(o) = &args.out {
        exp.out = Some(o.clone());
    }
    Ok(exp)
}

fn out_dir(exp: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let dir = exp
        .out
        .clone()
        .ok_or_else(|| UsageError("an output directory is required (--out)".into()))?;
    create_dir(&dir)?;
    Ok(dir)
}

fn training_data(
    exp: &mut ExperimentConfig,
    explicit_config: bool,
) -> anyhow::Result<TrajectoryDataset> {
    let path = exp
        .train_data
        .clone()
        .ok_or_else(|| UsageError("a training dataset is required (--data)".into()))?;
    let data = load_dataset(&path)?;
    if explicit_config && data.task() != exp.task {
        return Err(UsageError(format!(
            "config task {} does not match dataset task {}",
            exp.task.name(),
            data.task().name()
        ))
        .into());
    }
    exp.task = data.task();
    exp.blackout = data.header.blackout_prob;
    Ok(data)
}

/// Architecture from `--init`, or a fresh one scaled to `fit`.
fn initial_architecture(
    exp: &ExperimentConfig,
    init: Option<&Path>,
    arch_flag: Option<ArchKind>,
    fit: &TrajectoryDataset,
) -> anyhow::Result<Architecture> {
    match init {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            if let Some(k) = arch_flag.filter(|&k| k != ckpt.arch.kind) {
                return Err(UsageError(format!(
                    "--arch {k} conflicts with {} checkpoint {}",
                    ckpt.arch.kind,
                    p.display()
                ))
                .into());
            }
            if ckpt.arch.task != fit.task() {
                return Err(UsageError(format!(
                    "checkpoint task {} does not match dataset task {}",
                    ckpt.arch.task.name(),
                    fit.task().name()
                ))
                .into());
            }
            Ok(ckpt.architecture()?)
        }
        None => Ok(Architecture::new(
            exp.arch_config(exp.arch, fit.state_std()),
            exp.seed,
        )?),
    }
}

pub fn pretrain(args: &RunArgs, stage: Stage) -> anyhow::Result<()> {
    let mut exp = experiment(args)?;
    let dir = out_dir(&exp)?;
    let data = training_data(&mut exp, args.config.is_some())?;
    let mut arch = initial_architecture(&exp, args.init.as_deref(), args.arch, &data)?;
    exp.arch = arch.kind();
    let cfg = exp.train_config();
    fs::write(dir.join(CONFIG_FILE), exp.to_toml())?;
    let want_dynamics = matches!(stage, Stage::Dynamics | Stage::All);
    let want_measurement = matches!(stage, Stage::Measurement | Stage::All);
    if want_dynamics {
        if arch.dynamics.is_some() {
            let curve = pretrain_dynamics(&mut arch, &data, &cfg)?;
            write_log(&dir.join("loss-pretrain-dynamics.csv"), &curve)?;
            print_curve_end("dynamics", &curve);
        } else if stage == Stage::Dynamics {
            bail!(FilterError::Unsupported(format!(
                "{} has no dynamics model to pretrain",
                arch.kind()
            )));
        }
    }
    if want_measurement {
        if !arch.measurement_params().is_empty() {
            let curve = pretrain_measurement(&mut arch, &data, &cfg)?;
            write_log(&dir.join("loss-pretrain-measurement.csv"), &curve)?;
            print_curve_end("measurement", &curve);
        } else if stage == Stage::Measurement {
            bail!(FilterError::Unsupported(format!(
                "{} has no measurement models to pretrain",
                arch.kind()
            )));
        }
    }
    let ckpt = Checkpoint::new(&arch, &cfg, None, &TrainMeta::default());
    save_checkpoint(&ckpt, &dir.join(PRETRAINED))?;
    write_manifest(&dir)?;
    println!("wrote {}", dir.join(PRETRAINED).display());
    Ok(())
}

fn print_curve_end(name: &str, curve: &[LossPoint]) {
    if let (Some(a), Some(b)) = (curve.first(), curve.last()) {
        println!(
            "{name}: loss {:.6} -> {:.6} over {} epochs",
            a.loss,
            b.loss,
            curve.len()
        );
    }
}

/// Truncates the loss log to the epochs covered by a checkpoint.
fn trim_log(path: &Path, completed: u64) -> anyhow::Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = String::from(LOG_HEADER);
    for line in text.lines().skip(1) {
        let epoch = line.split(',').nth(1).and_then(|e| e.parse::<u64>().ok());
        if epoch.is_some_and(|e| e < completed) {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn train(args: &RunArgs, jobs: usize) -> anyhow::Result<()> {
    let (exp, mut arch, cfg, mut state, data, dir) = if args.resume {
        let dir = args
            .out
            .clone()
            .ok_or_else(|| UsageError("--resume needs the run's --out directory".into()))?;
        let mut exp = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
        if let Some(d) = &args.data {
            exp.train_data = Some(d.clone());
        }
        let data = training_data(&mut exp, false)?;
        let ckpt = load_checkpoint(&dir.join(LAST))?;
        let arch = ckpt.architecture()?;
        let state = TrainState {
            adam: match &ckpt.adam {
                Some(a) => a.clone(),
                None => TrainState::fresh(&arch, &ckpt.train).adam,
            },
            meta: ckpt.meta.clone(),
        };
        trim_log(&dir.join(TRAIN_LOG), state.meta.epoch)?;
        println!("resuming after epoch {}", state.meta.epoch);
        (exp, arch, ckpt.train, state, data, dir)
    } else {
        let mut exp = experiment(args)?;
        let dir = out_dir(&exp)?;
        let data = training_data(&mut exp, args.config.is_some())?;
        let fit_for_init = split_validation(&data, exp.train.validation_trajectories)?.0;
        let arch = initial_architecture(&exp, args.init.as_deref(), args.arch, &fit_for_init)?;
        exp.arch = arch.kind();
        let cfg = exp.train_config();
        fs::write(dir.join(CONFIG_FILE), exp.to_toml())?;
        fs::write(dir.join(TRAIN_LOG), LOG_HEADER)?;
        let state = TrainState::fresh(&arch, &cfg);
        (exp, arch, cfg, state, data, dir)
    };
    let (fit, validation) = split_validation(&data, cfg.validation_trajectories)?;
    let log = dir.join(TRAIN_LOG);
    let last = dir.join(LAST);
    let result = train_end_to_end(
        &mut arch,
        &fit,
        validation.as_ref(),
        &cfg,
        &mut state,
        jobs,
        |p, a, s| {
            // Log first: a resumed run drops log lines past its checkpoint.
            append(&log, &log_line(p)).map_err(|e| FilterError::Config(e.to_string()))?;
            let ckpt = Checkpoint::new(a, &cfg, Some(&s.adam), &s.meta);
            save_checkpoint(&ckpt, &last).map_err(|e| FilterError::Config(e.to_string()))?;
            println!(
                "{} epoch {} loss {:.6}{}",
                p.phase,
                p.epoch,
                p.loss,
                p.validation
                    .map_or(String::new(), |v| format!(" validation {v:.6}"))
            );
            Ok(())
        },
    );
    match result {
        Ok(_) => {
            let ckpt = Checkpoint::new(&arch, &cfg, Some(&state.adam), &state.meta);
            save_checkpoint(&ckpt, &dir.join(MODEL))?;
            if let Some(p) = &exp.test_data {
                let test = load_dataset(p)?;
                let opts = EvalOptions {
                    particles: cfg.eval_particles,
                    seed: exp.seed,
                    jobs,
                };
                let report = evaluate(&arch, &test, opts)?;
                fs::write(dir.join("report.csv"), report.to_csv())?;
                fs::write(dir.join("report.txt"), report.to_table())?;
                print!("{}", report.to_table());
            }
            write_manifest(&dir)?;
            println!(
                "trained {} on {} trajectories; wrote {}",
                exp.arch,
                fit.len(),
                dir.join(MODEL).display()
            );
            Ok(())
        }
        Err(e @ FilterError::Divergence { .. }) => {
            let ckpt = Checkpoint::new(&arch, &cfg, Some(&state.adam), &state.meta);
            save_checkpoint(&ckpt, &dir.join(LAST_GOOD))?;
            write_manifest(&dir)?;
            Err(anyhow!(e).context(format!(
                "parameters of the last good step saved to {}",
                dir.join(LAST_GOOD).display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn split_validation(
    data: &TrajectoryDataset,
    n: usize,
) -> anyhow::Result<(TrajectoryDataset, Option<TrajectoryDataset>)> {
    if n == 0 {
        return Ok((data.clone(), None));
    }
    if n >= data.len() {
        return Err(UsageError(format!(
            "{n} validation trajectories leave nothing to train on ({} in dataset)",
            data.len()
        ))
        .into());
    }
    let (fit, val) = data.split(n)?;
    Ok((fit, Some(val)))
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(
        || p.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    )
}

/// Per-trajectory RMSE with one column per report.
pub fn side_by_side(names: &[String], reports: &[EvalReport]) -> String {
    let w = names.iter().map(String::len).max().unwrap_or(0).max(12);
    let mut s = format!("{:>10}", "trajectory");
    for n in names {
        let _ = write!(s, " {n:>w$}");
    }
    s.push('\n');
    let rows = reports
        .iter()
        .map(|r| r.trajectories.len())
        .max()
        .unwrap_or(0);
    for i in 0..rows {
        let _ = write!(s, "{i:>10}");
        for r in reports {
            match r.trajectories.get(i) {
                Some(t) => {
                    let _ = write!(s, " {:>w$.3}", t.position_rmse_cm);
                }
                None => {
                    let _ = write!(s, " {:>w$}", "-");
                }
            }
        }
        s.push('\n');
    }
    let _ = write!(s, "{:>10}", "mean");
    for r in reports {
        let _ = write!(s, " {:>w$.3}", r.position_rmse_cm);
    }
    s.push('\n');
    s
}

pub fn eval(args: &EvalArgs, jobs: usize) -> anyhow::Result<()> {
    let mut paths: Vec<PathBuf> = args.checkpoint.iter().cloned().collect();
    paths.extend(args.compare.iter().cloned());
    if paths.is_empty() {
        return Err(UsageError("give --checkpoint or --compare".into()).into());
    }
    let data = load_dataset(&args.data)?;
    let mut names = Vec::new();
    let mut reports = Vec::new();
    let mut first_arch = None;
    for p in &paths {
        let ckpt = load_checkpoint(p)?;
        let arch = ckpt.architecture()?;
        let opts = EvalOptions {
            particles: args.particles.unwrap_or(ckpt.train.eval_particles),
            seed: args.seed,
            jobs,
        };
        let mut report = evaluate(&arch, &data, opts)?;
        report.estimator = format!("{}:{}", stem(p), arch.kind());
        names.push(stem(p));
        reports.push(report);
        first_arch.get_or_insert((arch, opts));
    }
    if args.baselines {
        let (arch, opts) = first_arch.as_ref().expect("at least one checkpoint");
        reports.push(static_baseline(&data, *opts)?);
        names.push("static".into());
        if let Some(d) = &arch.dynamics {
            reports.push(dead_reckoning(&arch.store, d, &data, *opts)?);
            names.push("dead-reckoning".into());
        }
    }
    let table = report_table(&reports);
    print!("{table}");
    let compare = (reports.len() > 1).then(|| side_by_side(&names, &reports));
    if let Some(c) = &compare {
        println!();
        print!("{c}");
    }
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        fs::write(dir.join("report.txt"), &table)?;
        for (n, r) in names.iter().zip(&reports) {
            fs::write(dir.join(format!("report-{n}.csv")), r.to_csv())?;
            fs::write(dir.join(format!("report-{n}.txt")), r.to_table())?;
        }
        if let Some(c) = &compare {
            fs::write(dir.join("compare.txt"), c)?;
        }
        write_manifest(dir)?;
    }
    Ok(())
}

pub fn trace(args: &TraceArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let arch = ckpt.architecture()?;
    if !arch.kind().is_crossmodal() {
        bail!(FilterError::Unsupported(format!(
            "tracing shows crossmodal weights, but {} is a {} checkpoint; use crossmodal-ekf or crossmodal-pf",
            args.checkpoint.display(),
            arch.kind()
        )));
    }
    let data = load_dataset(&args.data)?;
    let traj = data.trajectories.get(args.traj).ok_or_else(|| {
        UsageError(format!(
            "trajectory {} out of range ({} in dataset)",
            args.traj,
            data.len()
        ))
    })?;
    let frames = Frames::whole(data.task(), traj)?;
    let mut rng = stream(args.seed, 6, args.traj as u64, 0);
    let init = Initial::noisy(frames.state(0), &mut rng);
    let particles = args.particles.unwrap_or(ckpt.train.eval_particles);
    let trace = arch.trace(&frames, &init, particles, args.seed)?;
    create_dir(&args.out)?;
    let i = args.traj;
    fs::write(args.out.join(format!("trace-{i}.csv")), trace.to_csv())?;
    fs::write(
        args.out.join(format!("beta-{i}.svg")),
        plot::beta_plot(&trace, &MODALITY_LABELS),
    )?;
    let mut written = 2;
    if !arch.measurements.is_empty() {
        let t = args.frame.unwrap_or(frames.len() / 2);
        if t >= frames.len() {
            return Err(
                UsageError(format!("frame {t} out of range ({} frames)", frames.len())).into(),
            );
        }
        let grid = GridSpec::default();
        for (k, label) in MODALITY_LABELS
            .iter()
            .enumerate()
            .take(arch.measurements.len())
        {
            let values = arch.likelihood_grid(k, &frames, t, grid)?;
            let title = format!("{label} likelihood, trajectory {i}, frame {t}");
            let cells = grid.cells;
            let mut csv = String::from("dx,dy,log_likelihood\n");
            let offsets = grid.offsets();
            for (a, dx) in offsets.iter().enumerate() {
                for (b, dy) in offsets.iter().enumerate() {
                    let _ = writeln!(csv, "{dx},{dy},{}", values[a * cells + b]);
                }
            }
            let name = format!("likelihood-{i}-t{t}-m{}", k + 1);
            fs::write(args.out.join(format!("{name}.csv")), csv)?;
            fs::write(
                args.out.join(format!("{name}.svg")),
                plot::heatmap(&values, cells, grid.half_range, &title),
            )?;
            written += 2;
        }
    }
    write_manifest(&args.out)?;
    println!(
        "traced {} frames of trajectory {i}; wrote {written} files to {}",
        trace.len(),
        args.out.display()
    );
    Ok(())
}

/// Pretraining plus end-to-end training, holding out validation trajectories.
pub fn pipeline(
    exp: &ExperimentConfig,
    kind: ArchKind,
    data: &TrajectoryDataset,
    jobs: usize,
) -> mmfilter::Result<Architecture> {
    let cfg: TrainConfig = exp.train_config();
    let (fit, validation) = if cfg.validation_trajectories > 0 {
        let (f, v) = data.split(cfg.validation_trajectories)?;
        (f, Some(v))
    } else {
        (data.clone(), None)
    };
    let mut arch = Architecture::new(exp.arch_config(kind, fit.state_std()), exp.seed)?;
    if arch.dynamics.is_some() {
        pretrain_dynamics(&mut arch, &fit, &cfg)?;
    }
    if !arch.measurement_params().is_empty() {
        pretrain_measurement(&mut arch, &fit, &cfg)?;
    }
    let mut state = TrainState::fresh(&arch, &cfg);
    train_end_to_end(
        &mut arch,
        &fit,
        validation.as_ref(),
        &cfg,
        &mut state,
        jobs,
        |_, _, _| Ok(()),
    )?;
    Ok(arch)
}

pub fn sweep(args: &SweepArgs, jobs: usize) -> anyhow::Result<()> {
    let mut exp = ExperimentConfig::load(&args.config)?;
    if let Some(o) = &args.out {
        exp.out = Some(o.clone());
    }
    let dir = out_dir(&exp)?;
    let sw = exp.sweep.clone();
    if sw.archs.is_empty() || sw.blackouts.is_empty() {
        return Err(
            UsageError("sweep needs at least one architecture and blackout level".into()).into(),
        );
    }
    fs::write(dir.join(CONFIG_FILE), exp.to_toml())?;
    let datasets = map_indexed(jobs, sw.blackouts.len(), |b| {
        let spec = GenerateSpec {
            task: exp.task,
            n_traj: sw.traj + sw.test_traj,
            n_steps: sw.steps,
            blackout_prob: sw.blackouts[b],
            seed: exp.seed,
        };
        generate_dataset(&spec, 1).and_then(|d| d.split(sw.test_traj))
    })
    .into_iter()
    .collect::<mmfilter::Result<Vec<_>>>()?;
    let cells: Vec<(usize, ArchKind)> = (0..sw.blackouts.len())
        .flat_map(|b| sw.archs.iter().map(move |&k| (b, k)))
        .collect();
    let opts = EvalOptions {
        particles: exp.train.eval_particles,
        seed: exp.seed,
        jobs: 1,
    };
    let results = map_indexed(jobs, cells.len(), |c| {
        let (b, kind) = cells[c];
        let (train, test) = &datasets[b];
        pipeline(&exp, kind, train, 1).and_then(|arch| {
            let report = evaluate(&arch, test, opts)?;
            Ok((arch, report))
        })
    });
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut csv = String::new();
    for ((b, kind), r) in cells.iter().zip(results) {
        let level = sw.blackouts[*b];
        let name = format!("{kind}-b{:02}", (level * 100.0).round() as u64);
        match r {
            Ok((arch, report)) => {
                let ckpt = Checkpoint::new(&arch, &exp.train_config(), None, &TrainMeta::default());
                save_checkpoint(&ckpt, &dir.join(format!("{name}.dfck")))?;
                let body = report.to_csv();
                if csv.is_empty() {
                    csv.push_str(&body);
                } else {
                    csv.extend(body.lines().skip(1).map(|l| format!("{l}\n")));
                }
                reports.push(report);
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    let mut table = report_table(&reports);
    for f in &failures {
        let _ = writeln!(table, "failed {f}");
    }
    fs::write(dir.join("sweep.txt"), &table)?;
    fs::write(dir.join("sweep.csv"), csv)?;
    write_manifest(&dir)?;
    print!("{table}");
    if !failures.is_empty() {
        bail!("{} of {} sweep cells failed", failures.len(), cells.len());
    }
    Ok(())
}
