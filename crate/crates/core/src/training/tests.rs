use proptest::prelude::*;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::container::Container;
use crate::models::{ConvBackboneConfig, MlpConfig};
use crate::seed::Rng;
use crate::tasks::TaskSource;

fn small(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        mlp: MlpConfig { widths: vec![8] },
        r_dim: 6,
        d_z: 3,
        conv: ConvBackboneConfig {
            depth: 1,
            channels: 6,
            kernel_size: 5,
        },
        points_per_unit: 8,
        ..ModelConfig::new(kind)
    }
}

fn tasks(count: usize) -> Vec<Task> {
    let shape = TaskShape {
        n_points: 16,
        min_context: 1,
        max_context: 8,
    };
    sample_tasks(&TaskSource::Kernel(KernelSpec::Rbf), &shape, 8, "training-tests", count).unwrap()
}

fn noise(rng: &mut Rng, n: usize, d: usize) -> NdArray {
    NdArray::new(vec![n, d], (0..n * d).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn tiny_run(kind: ModelKind) -> TrainConfig {
    TrainConfig {
        model: small(kind),
        task_shape: TaskShape {
            n_points: 12,
            min_context: 1,
            max_context: 6,
        },
        epochs: 2,
        tasks_per_epoch: 8,
        batch_size: 4,
        learning_rate: 1e-2,
        n_z_val: 2,
        val_tasks: 3,
        seed: 17,
        ..TrainConfig::new(kind, DataSpec::Kernel(KernelSpec::Rbf))
    }
}

#[test]
fn unit_gaussian_at_the_targets() {
    let mut p = ModelParams::init(&small(ModelKind::ConvCnp), 0).unwrap();
    for n in ["head.mu.w", "head.sigma.w"] {
        p.set(n, NdArray::zeros(&[1, 6])).unwrap();
    }
    let raw = ((1.0 - p.config.sigma_floor).exp() - 1.0).ln();
    p.set("head.sigma.b", NdArray::new(vec![1, 1], vec![raw]).unwrap())
        .unwrap();
    let task = Task::from_parts(vec![0.2], vec![0.0], vec![-0.5, 0.2, 0.9], vec![0.0; 3]).unwrap();
    let loss = conditional_nll_loss(&p, &task).unwrap();
    assert!((loss - 0.918_938_533_204_672_8).abs() < 1e-12);
}

#[test]
fn loss_kind_checks() {
    let task = tasks(1).remove(0);
    let np = ModelParams::init(&small(ModelKind::Np), 0).unwrap();
    assert!(conditional_nll_loss(&np, &task).is_err());
    let cnp = ModelParams::init(&small(ModelKind::Cnp), 0).unwrap();
    assert!(matches!(
        elbo_loss(&cnp, &task, &NdArray::zeros(&[1, 3])),
        Err(Error::UnsupportedModel(_))
    ));
    assert!(elbo_loss(&np, &task, &NdArray::zeros(&[0, 3])).is_err());
    assert!(elbo_loss(&np, &task, &NdArray::zeros(&[2, 4])).is_err());
}

#[test]
fn kl_vanishes_when_context_is_target() {
    let mut rng = Rng::seed_from_u64(1);
    for kind in [ModelKind::Np, ModelKind::GbConp] {
        let p = ModelParams::init(&small(kind), 2).unwrap();
        for task in tasks(10) {
            let t = elbo_loss(&p, &task.full_context(), &noise(&mut rng, 2, 3)).unwrap();
            assert_eq!(t.kl, 0.0);
            assert_eq!(t.loss, -t.recon);
        }
    }
}

// Tiny NP (one hidden unit, r_dim = d_z = 1) evaluated by hand.
#[test]
fn elbo_matches_hand_evaluation() {
    let cfg = ModelConfig {
        mlp: MlpConfig { widths: vec![1] },
        r_dim: 1,
        d_z: 1,
        ..ModelConfig::new(ModelKind::Np)
    };
    let set = |p: &mut ModelParams, name: &str, v: &[f64]| {
        let shape = p.get(name).unwrap().shape().to_vec();
        p.set(name, NdArray::new(shape, v.to_vec()).unwrap()).unwrap();
    };
    let mut p = ModelParams::init(&cfg, 0).unwrap();
    set(&mut p, "encoder.0.w", &[0.7, -0.4]);
    set(&mut p, "encoder.0.b", &[0.3]);
    set(&mut p, "encoder.1.w", &[1.2]);
    set(&mut p, "encoder.1.b", &[-0.1]);
    set(&mut p, "latent.0.w", &[0.5, 0.9]);
    set(&mut p, "latent.0.b", &[0.2]);
    set(&mut p, "latent.mu.w", &[0.8]);
    set(&mut p, "latent.mu.b", &[-0.3]);
    set(&mut p, "latent.sigma.w", &[-0.6]);
    set(&mut p, "latent.sigma.b", &[0.1]);
    set(&mut p, "decoder.0.w", &[0.4, 0.5, -0.7]);
    set(&mut p, "decoder.0.b", &[0.6]);
    set(&mut p, "head.mu.w", &[1.1]);
    set(&mut p, "head.mu.b", &[-0.2]);
    set(&mut p, "head.sigma.w", &[0.3]);
    set(&mut p, "head.sigma.b", &[-0.5]);
    let task = Task::from_parts(vec![-0.5], vec![1.0], vec![-0.5, 0.5], vec![1.0, -0.4]).unwrap();
    let eps = [0.37, -1.21];

    let relu = |v: f64| v.max(0.0);
    let softplus = |v: f64| (1.0 + v.exp()).ln();
    let latent = |pts: &[(f64, f64)]| {
        let (mut m, mut r) = (0.0, 0.0);
        for &(x, y) in pts {
            let h = relu(0.5 * x + 0.9 * y + 0.2);
            m += 0.8 * h - 0.3;
            r += -0.6 * h + 0.1;
        }
        let n = pts.len() as f64;
        (m / n, 1e-3 + softplus(r / n))
    };
    let r = 1.2 * relu(0.7 * -0.5 - 0.4 * 1.0 + 0.3) - 0.1;
    let (mu_c, s_c) = latent(&[(-0.5, 1.0)]);
    let (mu_t, s_t) = latent(&[(-0.5, 1.0), (0.5, -0.4)]);
    let log_n =
        |y: f64, m: f64, s: f64| -0.5 * (2.0 * std::f64::consts::PI).ln() - s.ln() - 0.5 * ((y - m) / s).powi(2);
    let mut recon = 0.0;
    for e in eps {
        let z = mu_t + s_t * e;
        let mut ll = 0.0;
        for (x, y) in [(-0.5, 1.0), (0.5, -0.4)] {
            let h = relu(0.4 * x + 0.5 * r - 0.7 * z + 0.6);
            ll += log_n(y, 1.1 * h - 0.2, 1e-3 + softplus(0.3 * h - 0.5));
        }
        recon += ll / 2.0;
    }
    recon /= 2.0;
    let kl = (s_c / s_t).ln() + (s_t * s_t + (mu_t - mu_c).powi(2)) / (2.0 * s_c * s_c) - 0.5;

    let t = elbo_loss(&p, &task, &NdArray::new(vec![2, 1], eps.to_vec()).unwrap()).unwrap();
    assert!((t.recon - recon).abs() < 1e-10, "{} vs {recon}", t.recon);
    assert!((t.kl - kl).abs() < 1e-10, "{} vs {kl}", t.kl);
    assert!((t.loss - (kl / 2.0 - recon)).abs() < 1e-10);
}

#[test]
fn sample_count_does_not_change_the_expectation() {
    let p = ModelParams::init(&small(ModelKind::GbConp), 3).unwrap();
    let task = tasks(1).remove(0);
    let mut rng = Rng::seed_from_u64(7);
    let mut stats = |n_z: usize, reps: usize| {
        let v: Vec<f64> = (0..reps)
            .map(|_| elbo_loss(&p, &task, &noise(&mut rng, n_z, 3)).unwrap().loss)
            .collect();
        crate::eval::Estimate::from_values(&v).unwrap()
    };
    let (a, b) = (stats(1, 10_000), stats(16, 1_000));
    assert!(
        (a.mean - b.mean).abs() < 3.0 * a.std_error.hypot(b.std_error),
        "{a:?} {b:?}"
    );
}

#[test]
fn gradients_cover_every_parameter() {
    let mut rng = Rng::seed_from_u64(2);
    for kind in ModelKind::ALL {
        let p = ModelParams::init(&small(kind), 0).unwrap();
        let tg = task_gradient(&p, &tasks(1)[0], &noise(&mut rng, 1, 3)).unwrap();
        assert_eq!(tg.grads.len(), p.arrays().len());
        for (n, g) in &tg.grads {
            assert_eq!(g.shape(), p.get(n).unwrap().shape());
        }
    }
}

#[test]
fn config_validation() {
    let ok = tiny_run(ModelKind::Np);
    assert!(ok.validate().is_ok());
    for broken in [
        TrainConfig {
            epochs: 0,
            ..ok.clone()
        },
        TrainConfig {
            learning_rate: 1.0,
            ..ok.clone()
        },
        TrainConfig {
            learning_rate: -1e-3,
            ..ok.clone()
        },
        TrainConfig {
            n_z_train: 0,
            ..ok.clone()
        },
        TrainConfig {
            batch_size: 0,
            ..ok.clone()
        },
    ] {
        assert!(matches!(broken.validate(), Err(Error::Config(_))));
    }
    assert!(matches!(train(&TrainConfig { epochs: 0, ..ok }), Err(Error::Config(_))));
}

#[test]
fn data_spec_text_form() {
    for s in ["rbf", "periodic", "matern32", "csv:data/x.csv"] {
        let d: DataSpec = s.parse().unwrap();
        assert_eq!(d.to_string(), s);
    }
    assert!("csv:".parse::<DataSpec>().is_err());
    assert!("cosine".parse::<DataSpec>().is_err());
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 1,
        ..tiny_run(ModelKind::GbConp)
    };
    let out = train(&cfg).unwrap();
    assert_eq!(out.last.params, ModelParams::init(&cfg.model, cfg.seed).unwrap());
    assert_eq!(out.last.optimizer.unwrap().step, 2);
}

#[test]
fn runs_repeat_exactly_for_any_thread_count() {
    for kind in ModelKind::ALL {
        let cfg = tiny_run(kind);
        let a = train(&cfg).unwrap();
        let b = train(&TrainConfig { threads: 3, ..cfg }).unwrap();
        assert_eq!(a.last.params, b.last.params);
        assert_eq!(a.metrics.len(), 2);
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!((x.train_loss, x.val_ll, x.kl_mean), (y.train_loss, y.val_ll, y.kl_mean));
        }
        assert!(a.best.val_ll.unwrap() >= a.metrics.iter().map(|m| m.val_ll).fold(f64::MIN, f64::max));
    }
}

#[test]
fn observer_sees_every_epoch_and_can_abort() {
    let cfg = tiny_run(ModelKind::Cnp);
    let mut seen = Vec::new();
    train_with(&cfg, |m, c| {
        seen.push((m.epoch, c.epoch));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![(1, 1), (2, 2)]);
    let err = train_with(&cfg, |_, _| Err(Error::contract("stop"))).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn exploding_run_reports_its_coordinates() {
    let cfg = TrainConfig {
        learning_rate: 0.9,
        epochs: 50,
        ..tiny_run(ModelKind::Cnp)
    };
    // a huge step sends the network to ±∞ eventually, or it survives; both
    // are fine, but a failure must carry its coordinates
    match train(&cfg) {
        Ok(_) => {}
        Err(Error::NonFiniteLoss { epoch, batch }) => assert!(epoch < 50 && batch < 2),
        Err(e) => panic!("unexpected error {e}"),
    }
}

fn trained() -> Checkpoint {
    train(&tiny_run(ModelKind::GbConp)).unwrap().last
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let ck = trained();
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let bare = Checkpoint::from_params(ck.params.clone());
    let b = bare.to_bytes().unwrap();
    assert_eq!(Checkpoint::from_bytes(&b).unwrap().to_bytes().unwrap(), b);
}

#[test]
fn checkpoint_files_and_metrics_survive_restore() {
    let ck = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.gbcn");
    persist_checkpoint(&ck, &path).unwrap();
    let back = restore_checkpoint(&path).unwrap();
    let ts = tasks(5);
    let a = estimate_predictive_ll(&ck.params, &ts, 4, 1, 1).unwrap();
    let b = estimate_predictive_ll(&back.params, &ts, 4, 1, 1).unwrap();
    assert!((a.mean - b.mean).abs() < 1e-12);
    persist_checkpoint(&back, dir.path().join("d.gbcn")).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(dir.path().join("d.gbcn")).unwrap()
    );
}

#[test]
fn corrupted_checkpoints_refused() {
    let bytes = trained().to_bytes().unwrap();
    let mut flipped = bytes.clone();
    let at = bytes.len() - 40;
    flipped[at] ^= 0x10;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());

    let mut c = Container::from_bytes(&bytes).unwrap();
    c.metadata["format_version"] = 2.into();
    let msg = Checkpoint::from_container(c).unwrap_err().to_string();
    assert!(msg.contains("version"), "{msg}");

    let c = Container {
        metadata: serde_json::json!({"content": "tasks"}),
        arrays: vec![],
    };
    assert!(Checkpoint::from_container(c).is_err());
}

#[test]
fn moments_must_match_parameters() {
    let ck = trained();
    let mut c = ck.to_container().unwrap();
    c.arrays.retain(|(n, _)| n != "adam.v/head.mu.w");
    assert!(Checkpoint::from_container(c).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conditional_loss_bounded_by_peak_density(seed in 0u64..1000, kind in prop::sample::select(vec![ModelKind::Cnp, ModelKind::ConvCnp])) {
        let p = ModelParams::init(&small(kind), seed).unwrap();
        for t in tasks(3) {
            prop_assert!(conditional_nll_loss(&p, &t).unwrap() > -5.99);
        }
    }

    #[test]
    fn kl_is_nonnegative(seed in 0u64..1000, kind in prop::sample::select(vec![ModelKind::Np, ModelKind::GbConp])) {
        let p = ModelParams::init(&small(kind), seed).unwrap();
        let mut rng = Rng::seed_from_u64(seed);
        for t in tasks(3) {
            let terms = elbo_loss(&p, &t, &noise(&mut rng, 1, 3)).unwrap();
            prop_assert!(terms.kl >= 0.0);
            prop_assert!((terms.loss - (terms.kl / t.n_target() as f64 - terms.recon)).abs() < 1e-12);
        }
    }
}
