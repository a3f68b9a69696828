mod common;

use common::mini_config;
use vsr_core::dataio::{degrade, DegradeParams};
use vsr_core::synthetic::scenes;
use vsr_core::trainer::{pretrain_generator, Phase, Trainer};
use vsr_core::LrHrPair;

fn dataset() -> Vec<LrHrPair> {
    scenes(2, 32, 32, 4)
        .unwrap()
        .iter()
        .map(|c| degrade(c, &DegradeParams::default()).unwrap())
        .collect()
}

#[test]
fn one_step_descends_for_every_seed() {
    let data = dataset();
    for seed in 0..5 {
        let s = seed.to_string();
        let cfg = mini_config("rbpn_only", &[("seed", &s), ("learning_rate", "1e-4"), ("n_neighbors", "2")]);
        let mut t = Trainer::new(cfg).unwrap();
        let batch = t.sample_batch(&data).unwrap();
        let before = t.evaluate_pixel_loss(&batch).unwrap();
        t.train_step(&batch).unwrap();
        let after = t.evaluate_pixel_loss(&batch).unwrap();
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn discriminator_frozen_without_adversarial_weight() {
    let data = dataset();
    let cfg = mini_config("exp4_2", &[("lambda_adv", "0")]);
    let mut t = Trainer::new(cfg).unwrap();
    let d0 = t.models().discriminator.clone();
    for _ in 0..3 {
        let log = t.step_on(&data).unwrap();
        assert_eq!(log.discriminator, 0.0);
    }
    assert_eq!(t.models().discriminator, d0);

    let mut t = Trainer::new(mini_config("exp4_2", &[])).unwrap();
    let d0 = t.models().discriminator.clone();
    t.step_on(&data).unwrap();
    assert_ne!(t.models().discriminator, d0);
}

#[test]
fn same_seed_same_run() {
    let data = dataset();
    let run = |seed: &str| {
        let mut t = Trainer::new(mini_config("exp4_1", &[("seed", seed)])).unwrap();
        let logs: Vec<_> = (0..3).map(|_| t.step_on(&data).unwrap()).collect();
        (logs, t.export_state())
    };
    let a = run("7");
    let b = run("7");
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_ne!(run("8").1, a.1);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = dataset();
    let cfg = mini_config("exp4_3", &[("total_steps", "6"), ("pretrain_generator_steps", "2")]);
    let mut straight = Trainer::new(cfg.clone()).unwrap();
    let full: Vec<_> = (0..6).map(|_| straight.step_on(&data).unwrap()).collect();

    let mut first = Trainer::new(cfg.clone()).unwrap();
    let mut logs: Vec<_> = (0..3).map(|_| first.step_on(&data).unwrap()).collect();
    let state = first.export_state();
    drop(first);
    let mut resumed = Trainer::from_state(cfg, state).unwrap();
    assert_eq!(resumed.step(), 3);
    while !resumed.is_done() {
        logs.push(resumed.step_on(&data).unwrap());
    }
    assert_eq!(logs, full);
    assert_eq!(resumed.export_state(), straight.export_state());
}

#[test]
fn exp4_3_logs_pretrain_then_adversarial() {
    let data = dataset();
    let cfg = mini_config("exp4_3", &[("total_steps", "6"), ("pretrain_generator_steps", "2")]);
    let mut t = Trainer::new(cfg).unwrap();
    let d0 = t.models().discriminator.clone();
    let mut phases = Vec::new();
    while !t.is_done() {
        let log = t.step_on(&data).unwrap();
        if log.phase == Phase::Pretrain {
            assert_eq!(log.generator.terms.adv, 0.0);
            assert_eq!(log.discriminator, 0.0);
            assert_eq!(t.models().discriminator, d0);
        } else {
            assert!(log.discriminator > 0.0);
        }
        phases.push(log.phase);
    }
    assert_eq!(phases, [Phase::Pretrain, Phase::Pretrain, Phase::Adversarial, Phase::Adversarial, Phase::Adversarial, Phase::Adversarial]);
    assert_ne!(t.models().discriminator, d0);
}

#[test]
fn single_phase_presets_log_train() {
    let data = dataset();
    for p in ["exp4_1", "exp4_2", "rbpn_only"] {
        let mut t = Trainer::new(mini_config(p, &[("total_steps", "1")])).unwrap();
        assert_eq!(t.step_on(&data).unwrap().phase, Phase::Train);
    }
}

#[test]
fn pretraining() {
    let data = dataset();
    let cfg = mini_config("exp4_2", &[]);
    assert!(pretrain_generator(&cfg, &data, 0).is_err());
    let fresh = Trainer::new(cfg.clone()).unwrap().into_models();
    let m = pretrain_generator(&cfg, &data, 2).unwrap();
    assert_ne!(m.generator, fresh.generator);
    assert_eq!(m.discriminator, fresh.discriminator);
    Trainer::with_models(cfg, m).unwrap();
}

#[test]
fn learning_rate_decays_over_the_run() {
    let data = dataset();
    let mut t = Trainer::new(mini_config("rbpn_only", &[("total_steps", "6"), ("n_neighbors", "2")])).unwrap();
    let lrs: Vec<f64> = (0..6).map(|_| t.step_on(&data).unwrap().lr).collect();
    assert!(lrs[0] > lrs[5]);
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}
