use bandswap_core::data::{generate, Benchmark, DataConfig, Dataset};
use bandswap_core::gate::GateParams;
use bandswap_core::model::{ModelKind, TaskModel};
use bandswap_core::trainer::{evaluate, train, TrainConfig, Trainer};
use bandswap_core::uda::Mode;
use bandswap_core::Error;

fn bench() -> Benchmark {
    generate(&DataConfig {
        per_class: 12,
        ..DataConfig::default()
    })
    .unwrap()
}

fn config(mode: Mode, iters: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        iters,
        batch: 8,
        log_every: 10,
        ..TrainConfig::default()
    };
    cfg.loss.mode = mode;
    cfg
}

fn pinned_keep(n: usize) -> GateParams {
    GateParams::new(vec![[60.0, -60.0]; n], 1.0).unwrap()
}

#[test]
fn modes_attack_the_right_batches() {
    let b = bench();
    for (mode, src, tgt) in [
        (Mode::Baseline, false, false),
        (Mode::FaaS, true, false),
        (Mode::FaaT, false, true),
        (Mode::FaaFull, true, true),
    ] {
        let mut t = Trainer::new(config(mode, 20), &b).unwrap();
        let out = t.defend_step(0).unwrap();
        assert!(
            out.src_inputs.iter().all(|p| p.sample().is_some() == src),
            "{mode:?}"
        );
        assert!(
            out.tgt_inputs.iter().all(|p| p.sample().is_some() == tgt),
            "{mode:?}"
        );
        let expected = 8 * (src as usize + tgt as usize);
        assert_eq!(out.attacks, expected, "{mode:?}");
    }
}

#[test]
fn baseline_never_moves_the_gate() {
    let b = bench();
    let cfg = config(Mode::Baseline, 60);
    let before = Trainer::new(cfg.clone(), &b)
        .unwrap()
        .attacker()
        .gate()
        .clone();
    let out = train(cfg, &b).unwrap();
    assert_eq!(out.gate, before);
}

#[test]
fn phases_touch_only_their_own_parameters() {
    let b = bench();
    let mut t = Trainer::new(config(Mode::FaaFull, 30), &b).unwrap();
    for iter in 0..5 {
        let gate_before = t.attacker().gate().clone();
        let model_before = t.model().params().to_vec();
        let out = t.defend_step(iter).unwrap();
        assert_eq!(t.attacker().gate(), &gate_before);
        let model_after_defend = t.model().params().to_vec();
        assert_ne!(model_after_defend, model_before);
        t.attack_step(&out, iter).unwrap();
        assert_eq!(t.model().params(), &model_after_defend[..]);
        assert_ne!(t.attacker().gate(), &gate_before);
    }
}

#[test]
fn closed_gate_defend_step_equals_baseline_step() {
    let b = bench();
    let mut base = Trainer::new(config(Mode::Baseline, 30), &b).unwrap();
    let mut faa = Trainer::new(config(Mode::FaaFull, 30), &b).unwrap();
    faa.set_gate(pinned_keep(faa.config().bands)).unwrap();
    for iter in 0..3 {
        let lb = base.defend_step(iter).unwrap().train_loss;
        let lf = faa.defend_step(iter).unwrap().train_loss;
        assert_eq!(lb.to_bits(), lf.to_bits());
        assert_eq!(base.model().params(), faa.model().params());
    }
}

#[test]
fn identical_runs_write_identical_metrics() {
    let b = bench();
    let one = train(config(Mode::FaaFull, 200), &b).unwrap();
    let two = train(config(Mode::FaaFull, 200), &b).unwrap();
    assert_eq!(one.metrics.to_csv(), two.metrics.to_csv());
    assert!(one.metrics.rows().len() >= 20);
}

#[test]
fn random_model_scores_chance() {
    let b = generate(&DataConfig {
        per_class: 500,
        ..DataConfig::default()
    })
    .unwrap();
    assert_eq!(b.target_test.len(), 2000);
    let mut total = 0.0;
    for seed in 0..8 {
        let model = TaskModel::init(ModelKind::Mlp, 28 * 28, 64, 4, seed).unwrap();
        let (loss, acc) = evaluate(&model, &b.target_test).unwrap();
        assert!(loss.is_finite());
        total += acc;
    }
    let mean = total / 8.0;
    assert!((mean - 0.25).abs() <= 0.03, "mean accuracy {mean}");
    let zero = TaskModel::zeros(ModelKind::Linear, 28 * 28, 0, 4).unwrap();
    let (loss, _) = evaluate(&zero, &b.source_test).unwrap();
    assert!((loss - 4f64.ln()).abs() <= 1e-12);
}

#[test]
fn empty_dataset_cannot_be_evaluated() {
    let model = TaskModel::zeros(ModelKind::Linear, 4, 0, 2).unwrap();
    assert!(matches!(
        evaluate(&model, &Dataset::default()),
        Err(Error::State(_))
    ));
}

#[test]
fn divergence_is_reported() {
    let b = bench();
    let mut cfg = config(Mode::Baseline, 50);
    cfg.lr = 1e6;
    match train(cfg, &b) {
        Err(Error::Diverged { .. }) => {}
        other => panic!(
            "expected divergence, got {:?}",
            other.map(|o| o.metrics.rows().len())
        ),
    }
}

#[test]
fn saved_run_has_its_artifacts() {
    let b = bench();
    let dir = tempfile::tempdir().unwrap();
    let out = train(config(Mode::FaaFull, 20), &b).unwrap();
    out.save(dir.path()).unwrap();
    for f in ["metrics.csv", "model.ckpt", "gate.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let base = train(config(Mode::Baseline, 20), &b).unwrap();
    let d2 = tempfile::tempdir().unwrap();
    base.save(d2.path()).unwrap();
    assert!(!d2.path().join("gate.ckpt").exists());
}
