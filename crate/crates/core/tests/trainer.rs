use diffcore::{Graph, ParamStore, Tensor};
use mmfilter::frames::Frames;
use mmfilter::fusion::{ArchConfig, ArchKind, Architecture};
use mmfilter::models::LinearDynamics;
use mmfilter::nets::NetConfig;
use mmfilter::simenv::{generate_dataset, GenerateSpec, Task, TrajectoryDataset};
use mmfilter::trainer::{
    dynamics_loss, likelihood_target, pretrain_dynamics, pretrain_measurement, state_error, stream,
    subsequence_loss, train_end_to_end, Checkpoint, TrainConfig, TrainState,
};
use mmfilter::FilterError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data(n_traj: usize, steps: usize, blackout: f64, seed: u64) -> TrajectoryDataset {
    generate_dataset(
        &GenerateSpec {
            task: Task::Push,
            n_traj,
            n_steps: steps,
            blackout_prob: blackout,
            seed,
        },
        1,
    )
    .unwrap()
}

fn small_net() -> NetConfig {
    NetConfig {
        width: 16,
        encoder_layers: 2,
        trunk_layers: 2,
        lstm_width: 8,
        residual: true,
    }
}

fn arch(kind: ArchKind, data: &TrajectoryDataset, seed: u64) -> Architecture {
    let mut config = ArchConfig::new(kind, Task::Push);
    config.net = small_net();
    config.state_std = data.state_std();
    Architecture::new(config, seed).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        schedule: vec![2, 4],
        epochs_per_stage: 2,
        batches_per_epoch: 2,
        batch_size: 4,
        dynamics_epochs: 2,
        measurement_epochs: 2,
        particles: 8,
        seed: 5,
        ..TrainConfig::default()
    }
}

/// Mean subsequence loss on fixed windows with fixed noise.
fn fixed_loss(arch: &Architecture, data: &TrajectoryDataset, len: usize) -> f64 {
    let mut total = 0.0;
    for (i, traj) in data.trajectories.iter().enumerate() {
        let frames = Frames::from_trajectory(Task::Push, traj, 0, len).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let mut g = Graph::inference(&arch.store);
        let loss = subsequence_loss(&mut g, arch, &frames, 16, 0.0, &mut rng).unwrap();
        total += g.value(loss).item();
    }
    total / data.trajectories.len() as f64
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let d = data(6, 20, 0.0, 1);
    let cfg = TrainConfig {
        lr: 0.0,
        ..tiny_config()
    };
    for kind in [ArchKind::CrossmodalEkf, ArchKind::CrossmodalPf] {
        let mut a = arch(kind, &d, 2);
        let before = a.store.clone();
        pretrain_dynamics(&mut a, &d, &cfg).unwrap();
        pretrain_measurement(&mut a, &d, &cfg).unwrap();
        let mut state = TrainState::fresh(&a, &cfg);
        train_end_to_end(&mut a, &d, None, &cfg, &mut state, 1, |_, _, _| Ok(())).unwrap();
        assert_eq!(a.store, before, "{kind:?}");
    }
}

#[test]
fn end_to_end_training_reduces_held_out_loss() {
    let all = data(24, 30, 0.0, 3);
    let (train, test) = all.split(6).unwrap();
    let mut a = arch(ArchKind::CrossmodalEkf, &train, 4);
    let cfg = TrainConfig {
        schedule: vec![4, 8],
        epochs_per_stage: 6,
        batches_per_epoch: 4,
        batch_size: 8,
        dynamics_epochs: 4,
        measurement_epochs: 15,
        seed: 1,
        ..TrainConfig::default()
    };
    pretrain_dynamics(&mut a, &train, &cfg).unwrap();
    pretrain_measurement(&mut a, &train, &cfg).unwrap();
    let before = fixed_loss(&a, &test, 8);
    let mut state = TrainState::fresh(&a, &cfg);
    let curve =
        train_end_to_end(&mut a, &train, None, &cfg, &mut state, 1, |_, _, _| Ok(())).unwrap();
    assert_eq!(curve.len(), 12);
    let after = fixed_loss(&a, &test, 8);
    assert!(after < before, "held-out loss {before} -> {after}");
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let all = data(10, 20, 0.3, 6);
    let (train, validation) = all.split(3).unwrap();
    let cfg = tiny_config();
    let start = arch(ArchKind::CrossmodalEkf, &train, 7);

    let mut full = start.clone();
    let mut state = TrainState::fresh(&full, &cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.dfck");
    let curve = train_end_to_end(
        &mut full,
        &train,
        Some(&validation),
        &cfg,
        &mut state,
        1,
        |p, a, s| {
            if p.epoch == 1 {
                Checkpoint::new(a, &cfg, Some(&s.adam), &s.meta).save(&path)?;
            }
            Ok(())
        },
    )
    .unwrap();

    let ckpt = Checkpoint::load(&path).unwrap();
    let mut resumed = ckpt.architecture().unwrap();
    let mut state = TrainState {
        adam: ckpt.adam.clone().unwrap(),
        meta: ckpt.meta.clone(),
    };
    let rest = train_end_to_end(
        &mut resumed,
        &train,
        Some(&validation),
        &ckpt.train,
        &mut state,
        1,
        |_, _, _| Ok(()),
    )
    .unwrap();
    assert_eq!(rest.as_slice(), &curve[2..]);
    assert_eq!(resumed.store, full.store);
}

#[test]
fn training_is_independent_of_worker_count() {
    let d = data(6, 20, 0.2, 8);
    let cfg = tiny_config();
    let run = |jobs| {
        let mut a = arch(ArchKind::CrossmodalPf, &d, 1);
        let mut state = TrainState::fresh(&a, &cfg);
        let curve =
            train_end_to_end(&mut a, &d, None, &cfg, &mut state, jobs, |_, _, _| Ok(())).unwrap();
        (curve, a.store)
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn divergence_restores_the_last_good_parameters() {
    let mut d = data(4, 20, 0.0, 9);
    for t in &mut d.trajectories {
        t.states.iter_mut().for_each(|v| *v = f32::NAN);
    }
    let cfg = tiny_config();
    let mut a = arch(ArchKind::CrossmodalEkf, &d, 3);
    let before = a.store.clone();
    let mut state = TrainState::fresh(&a, &cfg);
    let err =
        train_end_to_end(&mut a, &d, None, &cfg, &mut state, 1, |_, _, _| Ok(())).unwrap_err();
    match err {
        FilterError::Divergence { phase, step, .. } => {
            assert_eq!(phase, "end-to-end-l2");
            assert_eq!(step, 0);
        }
        other => panic!("expected divergence, got {other}"),
    }
    assert_eq!(a.store, before);
}

#[test]
fn dynamics_pretraining_beats_the_identity_model() {
    let all = data(30, 40, 0.0, 10);
    let (train, test) = all.split(6).unwrap();
    let mut a = arch(ArchKind::CrossmodalEkf, &train, 2);
    let cfg = TrainConfig {
        dynamics_epochs: 8,
        batches_per_epoch: 8,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let curve = pretrain_dynamics(&mut a, &train, &cfg).unwrap();
    for phase in ["dynamics-h1", "dynamics-h4", "dynamics-h8", "dynamics-h16"] {
        let losses: Vec<f64> = curve
            .iter()
            .filter(|p| p.phase == phase)
            .map(|p| p.loss)
            .collect();
        assert_eq!(losses.len(), cfg.dynamics_epochs);
        assert!(
            losses.last().unwrap() <= losses.first().unwrap(),
            "{phase}: {losses:?}"
        );
    }
    let identity = LinearDynamics {
        m: Tensor::eye(2),
        b: Tensor::zeros(&[2, 4]),
        q: Tensor::eye(2),
    };
    let windows: Vec<(usize, usize)> = (0..test.trajectories.len())
        .flat_map(|i| (0..39).step_by(3).map(move |s| (i, s)))
        .collect();
    let eval = |dynamics: &dyn mmfilter::models::Dynamics| {
        let store = a.store.clone();
        let mut g = Graph::inference(&store);
        let l = dynamics_loss(&mut g, dynamics, &test, &windows, 1).unwrap();
        g.value(l).item()
    };
    let learned = eval(a.dynamics.as_ref().unwrap());
    let baseline = eval(&identity);
    assert!(
        learned < baseline,
        "learned {learned} vs identity {baseline}"
    );
}

#[test]
fn measurement_pretraining_fits_sensors_and_likelihoods() {
    let all = data(24, 30, 0.0, 12);
    let (train, test) = all.split(4).unwrap();
    let cfg = TrainConfig {
        measurement_epochs: 40,
        batches_per_epoch: 8,
        batch_size: 16,
        ..TrainConfig::default()
    };

    let mut ekf = arch(ArchKind::CrossmodalEkf, &train, 5);
    let cov: Vec<_> = ekf
        .sensors
        .iter()
        .flat_map(|s| s.cov_head.params())
        .collect();
    let frozen: Vec<Tensor> = cov.iter().map(|&id| ekf.store.get(id).clone()).collect();
    let curve = pretrain_measurement(&mut ekf, &train, &cfg).unwrap();
    assert!(curve.last().unwrap().loss < curve[0].loss);
    for (id, v) in cov.iter().zip(&frozen) {
        assert_eq!(ekf.store.get(*id), v);
    }
    // Squared error of each sensor and of always predicting the training mean.
    let mean = {
        let n = train.trajectories.iter().map(|t| t.len()).sum::<usize>() as f64;
        let mut m = [0.0; 2];
        for traj in &train.trajectories {
            for t in 0..traj.len() {
                for (k, v) in Task::Push
                    .normalize_state(&traj.state(t))
                    .iter()
                    .enumerate()
                {
                    m[k] += v / n;
                }
            }
        }
        m
    };
    let mut sq = vec![0.0; ekf.sensors.len()];
    let mut base = 0.0;
    for traj in &test.trajectories {
        let frames = Frames::from_trajectory(Task::Push, traj, 0, traj.len()).unwrap();
        let mut g = Graph::inference(&ekf.store);
        let obs = frames.bind(&mut g);
        for (k, s) in ekf.sensors.iter().enumerate() {
            let (z, _) = s.sense(&mut g, &obs, s.modalities).unwrap();
            for (a, b) in g.value(z).data().iter().zip(frames.states.data()) {
                sq[k] += (a - b) * (a - b);
            }
        }
        for (i, b) in frames.states.data().iter().enumerate() {
            base += (mean[i % 2] - b) * (mean[i % 2] - b);
        }
    }
    assert!(sq[0] < 0.5 * base, "image sensor {} vs mean {base}", sq[0]);

    let mut pf = arch(ArchKind::CrossmodalPf, &train, 5);
    pretrain_measurement(&mut pf, &train, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut wins, mut total) = (0, 0);
    for traj in &test.trajectories {
        let frames = Frames::from_trajectory(Task::Push, traj, 0, traj.len()).unwrap();
        let mut g = Graph::inference(&pf.store);
        let obs = frames.bind(&mut g);
        // The image model; the haptic one is uninformative out of contact.
        for m in &pf.measurements[..1] {
            let feats = m.observe(&mut g, &obs).unwrap();
            for t in 0..frames.len() {
                let truth = frames.state(t).to_vec();
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let far = [truth[0] + 0.3 * angle.cos(), truth[1] + 0.3 * angle.sin()];
                let sv = g.constant(
                    Tensor::new(&[2, 2], vec![truth[0], truth[1], far[0], far[1]]).unwrap(),
                );
                let ll = m.log_likelihood(&mut g, &feats, t, sv).unwrap();
                let v = g.value(ll).data();
                wins += usize::from(v[0] > v[1]);
                total += 1;
            }
        }
    }
    let rate = wins as f64 / total as f64;
    assert!(rate > 0.9, "truth preferred in {rate} of frames");
}

#[test]
fn likelihood_target_is_an_isotropic_gaussian_log_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.random_range(1..=3);
        let sigma = rng.random_range(0.05..2.0);
        let truth: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let states: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let got = likelihood_target(&states, &truth, sigma);
        for (x, v) in states.iter().zip(got) {
            let density: f64 = x
                .iter()
                .zip(&truth)
                .map(|(a, m)| {
                    let z = (a - m) / sigma;
                    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
                })
                .product();
            assert!((v - density.ln()).abs() < 1e-9, "{v} vs {}", density.ln());
        }
    }
}

#[test]
fn door_angle_errors_wrap_around() {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let period = 2.0 * std::f64::consts::PI / Task::Door.state_scale()[2];
    let truth = [0.1, -0.2, 0.3];
    let est = g.constant(Tensor::row(&[0.1, -0.2, 0.3 + period + 0.05]));
    let e = state_error(&mut g, Task::Door, est, &truth).unwrap();
    let v = g.value(e).data();
    assert_eq!(&v[..2], &[0.0, 0.0]);
    assert!((v[2] - 0.0025).abs() < 1e-12);
    let est = g.constant(Tensor::row(&[0.1 + period, -0.2]));
    let e = state_error(&mut g, Task::Push, est, &truth[..2]).unwrap();
    assert!((g.value(e).data()[0] - period * period).abs() < 1e-9);
}

#[test]
fn random_streams_are_reproducible_and_distinct() {
    let draw = |mut r: ChaCha8Rng| (0..4).map(|_| r.random::<u64>()).collect::<Vec<_>>();
    let base = draw(stream(1, 2, 3, 4));
    assert_eq!(base, draw(stream(1, 2, 3, 4)));
    for other in [
        stream(0, 2, 3, 4),
        stream(1, 1, 3, 4),
        stream(1, 2, 2, 4),
        stream(1, 2, 3, 5),
    ] {
        assert_ne!(base, draw(other));
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let cases: Vec<(&str, TrainConfig)> = vec![
        (
            "empty schedule",
            TrainConfig {
                schedule: vec![],
                ..TrainConfig::default()
            },
        ),
        (
            "zero length",
            TrainConfig {
                schedule: vec![0, 2],
                ..TrainConfig::default()
            },
        ),
        (
            "shrinking",
            TrainConfig {
                schedule: vec![4, 2],
                ..TrainConfig::default()
            },
        ),
        (
            "horizons",
            TrainConfig {
                horizons: vec![1, 2],
                ..TrainConfig::default()
            },
        ),
        (
            "batch",
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ),
        (
            "particles",
            TrainConfig {
                particles: 0,
                ..TrainConfig::default()
            },
        ),
        (
            "negative lr",
            TrainConfig {
                lr: -1.0,
                ..TrainConfig::default()
            },
        ),
        (
            "nan lr",
            TrainConfig {
                lr: f64::NAN,
                ..TrainConfig::default()
            },
        ),
        (
            "sigma",
            TrainConfig {
                measurement_sigma: 0.0,
                ..TrainConfig::default()
            },
        ),
    ];
    assert!(TrainConfig::default().validate().is_ok());
    let d = data(2, 10, 0.0, 0);
    for (name, cfg) in cases {
        assert!(
            matches!(cfg.validate(), Err(FilterError::Config(_))),
            "{name}"
        );
        let mut a = arch(ArchKind::CrossmodalEkf, &d, 0);
        assert!(pretrain_dynamics(&mut a, &d, &cfg).is_err(), "{name}");
    }
}

#[test]
fn windows_longer_than_every_trajectory_are_an_error() {
    let d = data(2, 6, 0.0, 0);
    let cfg = TrainConfig {
        schedule: vec![20],
        ..tiny_config()
    };
    let mut a = arch(ArchKind::CrossmodalEkf, &d, 0);
    let mut state = TrainState::fresh(&a, &cfg);
    let before = a.store.clone();
    assert!(train_end_to_end(&mut a, &d, None, &cfg, &mut state, 1, |_, _, _| Ok(())).is_err());
    assert_eq!(a.store, before);
}
