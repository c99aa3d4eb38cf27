mod common;

use std::ops::ControlFlow;

use bisgan_core::models::{DiscriminatorConfig, GeneratorConfig, ModelCheckpoint};
use bisgan_core::sigdata::{batch_tensor, make_domains, synthesize_corpus};
use bisgan_core::training::{
    adversarial_losses, config_digest, cycle_loss, generate, train, train_observed, Direction, TrainObserver, Trainer,
};
use bisgan_core::{DomainBundle, DomainMode, Error, Label, LossRecord, SignatureSample, Tensor, TrainConfig};
use common::random_tensor;
use proptest::prelude::*;

fn tiny_gen() -> GeneratorConfig {
    GeneratorConfig {
        resolution: 16,
        base_channels: 4,
        n_residual: 1,
        attention_after_residual: true,
    }
}

fn tiny_disc() -> DiscriminatorConfig {
    DiscriminatorConfig {
        conv_channels: vec![4, 8],
        spp_levels: vec![1, 2],
        fc_width: 8,
    }
}

fn tiny_train(mode: DomainMode, steps: u64) -> TrainConfig {
    TrainConfig {
        mode,
        steps,
        batch_size: 2,
        seed: 5,
        checkpoint_every: 2,
        ..TrainConfig::default()
    }
}

fn bundle(mode: DomainMode) -> DomainBundle {
    make_domains(&synthesize_corpus(3, 2, 3, 3, 16).unwrap(), mode).unwrap()
}

fn assert_finite(r: &LossRecord) {
    for v in [r.loss_gen_total, r.loss_disc_a, r.loss_disc_b, r.loss_cycle, r.loss_adv, r.loss_identity] {
        assert!(v.is_finite() && v >= 0.0, "{r:?}");
    }
}

#[test]
fn cycle_loss_examples() {
    let x = random_tensor::<f64>(&[2, 1, 4, 4], 1);
    assert_eq!(cycle_loss(&x, &x).unwrap(), 0.0);
    let ones = Tensor::full(&[3, 1, 4, 4], 1.0f32);
    let minus = Tensor::full(&[3, 1, 4, 4], -1.0f32);
    assert_eq!(cycle_loss(&ones, &minus).unwrap(), 2.0);
    let err = cycle_loss(&ones, &Tensor::zeros(&[3, 1, 4, 5])).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
}

#[test]
fn cycle_loss_matches_elementwise_mean() {
    let a = random_tensor::<f64>(&[3, 1, 7, 5], 2);
    let b = random_tensor::<f64>(&[3, 1, 7, 5], 3);
    let mut sum = 0.0;
    for i in 0..a.data().len() {
        sum += (a.data()[i] - b.data()[i]).abs();
    }
    let want = sum / a.data().len() as f64;
    assert!((cycle_loss(&a, &b).unwrap() - want).abs() < 1e-7);
}

#[test]
fn adversarial_loss_examples() {
    assert_eq!(adversarial_losses(&[1.0; 4], &[0.0; 4]).unwrap(), (0.0, 1.0));
    assert_eq!(adversarial_losses(&[0.0; 3], &[1.0; 3]).unwrap(), (1.0, 0.0));
    assert!(matches!(adversarial_losses(&[], &[1.0]), Err(Error::InvalidInput(_))));
    assert!(matches!(adversarial_losses(&[1.0], &[]), Err(Error::InvalidInput(_))));
}

proptest! {
    #[test]
    fn adversarial_losses_match_formula(
        real in prop::collection::vec(-3.0f64..3.0, 1..12),
        fake in prop::collection::vec(-3.0f64..3.0, 1..12),
    ) {
        let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
        let disc = 0.5 * mean(&real, &|r| (r - 1.0) * (r - 1.0)) + 0.5 * mean(&fake, &|f| f * f);
        let gen = mean(&fake, &|f| (f - 1.0) * (f - 1.0));
        let (d, g) = adversarial_losses(&real, &fake).unwrap();
        prop_assert!((d - disc).abs() < 1e-7);
        prop_assert!((g - gen).abs() < 1e-7);
    }

    #[test]
    fn cycle_loss_is_symmetric_and_zero_on_diagonal(seed in any::<u64>()) {
        let a = random_tensor::<f32>(&[2, 1, 3, 3], seed);
        let b = random_tensor::<f32>(&[2, 1, 3, 3], seed ^ 1);
        prop_assert_eq!(cycle_loss(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(cycle_loss(&a, &b).unwrap(), cycle_loss(&b, &a).unwrap());
    }
}

#[test]
fn single_step_yields_one_finite_record() {
    let (cp, records) = train(&bundle(DomainMode::Paradigm), &tiny_gen(), &tiny_disc(), &tiny_train(DomainMode::Paradigm, 1)).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].step, 1);
    assert_finite(&records[0]);
    assert_eq!(records[0].loss_identity, 0.0);
    assert_eq!(cp.step, 1);
    assert_eq!(cp.mode, DomainMode::Paradigm);
}

#[test]
fn short_run_is_deterministic() {
    let b = bundle(DomainMode::Paradigm);
    let t = tiny_train(DomainMode::Paradigm, 4);
    let (cp1, r1) = train(&b, &tiny_gen(), &tiny_disc(), &t).unwrap();
    let (cp2, r2) = train(&b, &tiny_gen(), &tiny_disc(), &t).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(cp1, cp2);
    r1.iter().for_each(assert_finite);
    let (_, r3) = train(&b, &tiny_gen(), &tiny_disc(), &TrainConfig { seed: 6, ..t }).unwrap();
    assert_ne!(r1, r3);
}

#[test]
fn identity_term_is_reported_when_enabled() {
    let t = TrainConfig {
        lambda_identity: 0.5,
        ..tiny_train(DomainMode::Standard, 1)
    };
    let (_, r) = train(&bundle(DomainMode::Standard), &tiny_gen(), &tiny_disc(), &t).unwrap();
    assert!(r[0].loss_identity > 0.0);
    let expected = r[0].loss_adv + t.lambda_cycle * r[0].loss_cycle + t.lambda_identity * r[0].loss_identity;
    assert!((r[0].loss_gen_total - expected).abs() < 1e-4 * expected.max(1.0), "{:?}", r[0]);
}

/// Records, per step, the label and position-in-domain of every batch member.
struct BatchLog {
    a: Vec<Vec<(Label, usize)>>,
    b: Vec<Vec<(Label, usize)>>,
    checkpoints: Vec<u64>,
    domains: DomainBundle,
}

impl BatchLog {
    fn new(bundle: &DomainBundle) -> Self {
        BatchLog {
            a: Vec::new(),
            b: Vec::new(),
            checkpoints: Vec::new(),
            domains: bundle.clone(),
        }
    }
}

fn locate(domain: &[SignatureSample], s: &SignatureSample) -> usize {
    domain.iter().position(|d| d == s).unwrap()
}

impl TrainObserver for BatchLog {
    fn on_batch(&mut self, _step: u64, a: &[&SignatureSample], b: &[&SignatureSample]) {
        let d = &self.domains;
        self.a.push(a.iter().map(|s| (s.label, locate(&d.domain_a, s))).collect());
        self.b.push(b.iter().map(|s| (s.label, locate(&d.domain_b, s))).collect());
    }

    fn on_checkpoint(&mut self, cp: &ModelCheckpoint) {
        self.checkpoints.push(cp.step);
    }
}

#[test]
fn modes_differ_only_in_domain_labels() {
    let corpus = synthesize_corpus(3, 2, 3, 3, 16).unwrap();
    let mut logs = Vec::new();
    for mode in [DomainMode::Standard, DomainMode::Paradigm] {
        let b = make_domains(&corpus, mode).unwrap();
        let mut log = BatchLog::new(&b);
        train_observed(&b, &tiny_gen(), &tiny_disc(), &tiny_train(mode, 3), &mut log).unwrap();
        logs.push(log);
    }
    let (std, par) = (&logs[0], &logs[1]);
    assert!(std.a.iter().flatten().all(|(l, _)| *l == Label::Genuine));
    assert!(std.b.iter().flatten().all(|(l, _)| *l == Label::Forged));
    assert!(par.a.iter().flatten().all(|(l, _)| *l == Label::Forged));
    assert!(par.b.iter().flatten().all(|(l, _)| *l == Label::Genuine));
    let pos = |v: &Vec<Vec<(Label, usize)>>| -> Vec<Vec<usize>> { v.iter().map(|b| b.iter().map(|p| p.1).collect()).collect() };
    assert_eq!(pos(&std.a), pos(&par.a));
    assert_eq!(pos(&std.b), pos(&par.b));
    assert_eq!(std.checkpoints, vec![2, 3]);
    assert_eq!(par.checkpoints, vec![2, 3]);
}

#[test]
fn observer_can_stop_early() {
    struct StopAt(u64);
    impl TrainObserver for StopAt {
        fn on_record(&mut self, r: &LossRecord) -> ControlFlow<()> {
            if r.step == self.0 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        }
    }
    let b = bundle(DomainMode::Standard);
    let (cp, r) = train_observed(&b, &tiny_gen(), &tiny_disc(), &tiny_train(DomainMode::Standard, 10), &mut StopAt(2)).unwrap();
    assert_eq!(r.len(), 2);
    assert_eq!(cp.step, 2);
}

#[test]
fn one_step_moves_all_four_networks() {
    let t = tiny_train(DomainMode::Paradigm, 1);
    let mut trainer = Trainer::new(&tiny_gen(), &tiny_disc(), &t).unwrap();
    let before = trainer.checkpoint();
    let b = bundle(DomainMode::Paradigm);
    let xa = batch_tensor(b.domain_a[..2].iter().map(|s| &s.image)).unwrap();
    let xb = batch_tensor(b.domain_b[..2].iter().map(|s| &s.image)).unwrap();
    let r = trainer.train_step(&xa, &xb).unwrap();
    assert!(r.loss_gen_total > 0.0 && r.loss_disc_a > 0.0 && r.loss_disc_b > 0.0);
    let after = trainer.checkpoint();
    for ((name, p0), (_, p1)) in before.networks().iter().zip(after.networks().iter()) {
        assert_ne!(p0, p1, "{name} unchanged");
    }
    assert_eq!(after.step, 1);
    assert_eq!(after.config_digest, before.config_digest);
}

#[test]
fn config_validation_errors() {
    let b = bundle(DomainMode::Paradigm);
    let big = TrainConfig {
        batch_size: 7,
        ..tiny_train(DomainMode::Paradigm, 1)
    };
    assert!(matches!(train(&b, &tiny_gen(), &tiny_disc(), &big), Err(Error::InvalidConfig(_))));
    let wrong_mode = tiny_train(DomainMode::Standard, 1);
    assert!(matches!(train(&b, &tiny_gen(), &tiny_disc(), &wrong_mode), Err(Error::InvalidConfig(_))));
    let zero = TrainConfig {
        steps: 0,
        ..tiny_train(DomainMode::Paradigm, 1)
    };
    assert!(matches!(train(&b, &tiny_gen(), &tiny_disc(), &zero), Err(Error::InvalidConfig(_))));
    let res32 = GeneratorConfig {
        resolution: 32,
        ..tiny_gen()
    };
    let err = train(&b, &res32, &tiny_disc(), &tiny_train(DomainMode::Paradigm, 1)).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
}

#[test]
fn huge_learning_rate_diverges_with_step() {
    let t = TrainConfig {
        lr: 1e30,
        ..tiny_train(DomainMode::Paradigm, 20)
    };
    match train(&bundle(DomainMode::Paradigm), &tiny_gen(), &tiny_disc(), &t) {
        Err(Error::Divergence { step, .. }) => assert!((1..=20).contains(&step)),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn digest_tracks_every_config_section() {
    let t = tiny_train(DomainMode::Paradigm, 1);
    let base = config_digest(&tiny_gen(), &tiny_disc(), &t);
    assert_eq!(base, config_digest(&tiny_gen(), &tiny_disc(), &t));
    let g2 = GeneratorConfig {
        n_residual: 2,
        ..tiny_gen()
    };
    let d2 = DiscriminatorConfig {
        fc_width: 9,
        ..tiny_disc()
    };
    assert_ne!(base, config_digest(&g2, &tiny_disc(), &t));
    assert_ne!(base, config_digest(&tiny_gen(), &d2, &t));
    assert_ne!(base, config_digest(&tiny_gen(), &tiny_disc(), &TrainConfig { lr: 1e-3, ..t.clone() }));
    assert_ne!(base, config_digest(&tiny_gen(), &tiny_disc(), &tiny_train(DomainMode::Standard, 1)));
}

#[test]
fn generate_contract() {
    let b = bundle(DomainMode::Paradigm);
    let (cp, _) = train(&b, &tiny_gen(), &tiny_disc(), &tiny_train(DomainMode::Paradigm, 1)).unwrap();
    let corpus = synthesize_corpus(9, 5, 1, 1, 16).unwrap();
    let sources = corpus.samples();
    assert_eq!(sources.len(), 10);
    let out = generate(&cp, sources, Direction::AToB).unwrap();
    assert_eq!(out.len(), 10);
    assert!(out.iter().all(|im| im.side() == 16 && im.pixels().iter().all(|p| (-1.0..=1.0).contains(p))));
    assert_eq!(out, generate(&cp, sources, Direction::AToB).unwrap());
    assert_ne!(out, generate(&cp, sources, Direction::BToA).unwrap());
    assert!(matches!(generate(&cp, &[], Direction::AToB), Err(Error::InvalidInput(_))));
    let big = synthesize_corpus(9, 1, 1, 1, 32).unwrap();
    assert!(matches!(generate(&cp, big.samples(), Direction::AToB), Err(Error::Shape { .. })));
}

#[test]
fn generated_batches_match_single_image_runs() {
    let b = bundle(DomainMode::Standard);
    let (cp, _) = train(&b, &tiny_gen(), &tiny_disc(), &tiny_train(DomainMode::Standard, 1)).unwrap();
    let corpus = synthesize_corpus(4, 6, 1, 1, 16).unwrap();
    let all = generate(&cp, corpus.samples(), Direction::BToA).unwrap();
    for (i, s) in corpus.samples().iter().enumerate() {
        let one = generate(&cp, std::slice::from_ref(s), Direction::BToA).unwrap();
        for (x, y) in one[0].pixels().iter().zip(all[i].pixels()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn train_config_rejects_unknown_fields() {
    let ok: TrainConfig = serde_json::from_str(r#"{"steps": 3, "mode": "paradigm"}"#).unwrap();
    assert_eq!(ok.steps, 3);
    assert_eq!(ok.lr, 2e-4);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 3}"#).is_err());
}
