//! Training-loop integration: bounds, early stopping, resume equivalence,
//! loss decrease, and the ablation harness.

use rce_core::augment::TransformPolicy;
use rce_core::data::{few_shot_split, split_fraction, synth_two_domain, DomainDataset, Shift, Split, SynthSpec};
use rce_core::eval::{ablate, ExtractionRule};
use rce_core::model::{Backbone, ModelSpec, RceModel};
use rce_core::trainer::{Ablation, TrainConfig, Trainer};

fn task(seed: u64) -> (DomainDataset, DomainDataset, DomainDataset, DomainDataset) {
    let spec = SynthSpec {
        n_classes: 2,
        samples_per_class: 16,
        target_samples_per_class: Some(10),
        shift: Shift::Invert,
        seed,
    };
    let (source, target) = synth_two_domain(&spec).unwrap();
    let (target_train, rest) = few_shot_split(&target, 3, seed).unwrap();
    let (val, test) = split_fraction(&rest, 0.5, seed, Split::Val, Split::Test).unwrap();
    (source, target_train, val, test)
}

fn config(ablation: Ablation, seed: u64) -> (TrainConfig, ModelSpec) {
    let config = TrainConfig {
        ablation,
        seed,
        max_steps: 60,
        batch_size: 6,
        eval_interval: 20,
        early_stop_patience: 50,
        source_prototypes_per_class: 3,
        target_prototypes_per_class: 1,
        augmentation: TransformPolicy::crop_rotate(1),
        ..TrainConfig::default()
    };
    let spec = ModelSpec {
        input_shape: (1, 16, 16),
        num_classes: 2,
        num_concepts: 2,
        concept_dim: 1,
        backbone: Backbone::SmallConv,
        seed,
    };
    (config, spec)
}

fn param_dump(model: &RceModel) -> Vec<u64> {
    let mut out = Vec::new();
    model.visit_params(&mut |_, t| out.extend(t.data().iter().map(|v| v.to_bits())));
    out
}

#[test]
fn zero_steps_returns_untrained_model() {
    let (source, tt, val, _) = task(1);
    let (mut cfg, spec) = config(Ablation::RcePcgCcl, 1);
    cfg.max_steps = 0;
    let fresh = RceModel::new(spec.clone()).unwrap();
    let mut trainer = Trainer::new(cfg, spec, source, tt, val).unwrap();
    let out = trainer.run().unwrap();
    assert_eq!(out.steps_run, 0);
    assert!(out.history.is_empty());
    assert!(out.evals.is_empty());
    assert_eq!(param_dump(&out.model), param_dump(&fresh));
}

#[test]
fn forced_plateau_stops_after_two_evaluations() {
    let (source, tt, val, _) = task(2);
    let (mut cfg, spec) = config(Ablation::Rce, 2);
    // Zero learning rate freezes the model, so validation accuracy never
    // improves after the first evaluation sets the best.
    cfg.lr0 = 0.0;
    cfg.max_steps = 1000;
    cfg.eval_interval = 10;
    cfg.early_stop_patience = 1;
    let mut trainer = Trainer::new(cfg, spec, source, tt, val).unwrap();
    let out = trainer.run().unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.evals.len(), 2);
    assert!(out.evals[0].improved);
    assert!(!out.evals[1].improved);
    assert_eq!(out.steps_run, 20);
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let (source, tt, val, _) = task(3);
    let (mut cfg, spec) = config(Ablation::RcePcgCcl, 3);
    cfg.max_steps = 24;

    // Uninterrupted run.
    let mut full = Trainer::new(cfg.clone(), spec.clone(), source.clone(), tt.clone(), val.clone()).unwrap();
    let mut full_records = Vec::new();
    for _ in 0..24 {
        full_records.push(full.step().unwrap());
    }

    // Split run: 10 steps, save, resume, 14 more.
    let dir = tempfile::tempdir().unwrap();
    let state_path = dir.path().join("state.rcs");
    let mut head = Trainer::new(cfg.clone(), spec, source.clone(), tt.clone(), val.clone()).unwrap();
    let mut split_records = Vec::new();
    for _ in 0..10 {
        split_records.push(head.step().unwrap());
    }
    head.save_state(&state_path).unwrap();
    drop(head);
    let mut tail = Trainer::resume(cfg.clone(), source.clone(), tt.clone(), val.clone(), &state_path).unwrap();
    assert_eq!(tail.state.step, 10);
    for _ in 0..14 {
        split_records.push(tail.step().unwrap());
    }

    for (a, b) in full_records.iter().zip(&split_records) {
        assert_eq!(
            serde_json::to_string(a).unwrap(),
            serde_json::to_string(b).unwrap()
        );
    }
    assert_eq!(param_dump(&full.state.model), param_dump(&tail.state.model));

    // Resuming under a different config is rejected.
    let mut other = cfg;
    other.lr0 *= 2.0;
    assert!(Trainer::resume(other, source, tt, val, &state_path).is_err());
}

#[test]
fn loss_decreases_over_training() {
    let (source, tt, val, _) = task(4);
    let (mut cfg, spec) = config(Ablation::RcePcgCcl, 4);
    cfg.max_steps = 300;
    cfg.eval_interval = 100;
    cfg.early_stop_patience = 100;
    let mut trainer = Trainer::new(cfg, spec, source, tt, val).unwrap();
    let out = trainer.run().unwrap();
    let median = |xs: &[f64]| {
        let mut v = xs.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let first: Vec<f64> = out.history[..100].iter().map(|r| r.breakdown.total).collect();
    let last: Vec<f64> = out.history[200..].iter().map(|r| r.breakdown.total).collect();
    assert!(
        median(&first) > median(&last),
        "median first-100 {} vs last-100 {}",
        median(&first),
        median(&last)
    );
}

#[test]
fn zero_weights_isolate_terms_exactly() {
    // rce_pcg with lambda1 = lambda2 = 0 must walk the same parameter
    // trajectory as plain rce: disabled terms contribute zero gradient.
    let (source, tt, val, _) = task(6);
    let (mut cfg, spec) = config(Ablation::Rce, 6);
    cfg.max_steps = 25;
    let mut rce = Trainer::new(cfg.clone(), spec.clone(), source.clone(), tt.clone(), val.clone()).unwrap();
    cfg.ablation = Ablation::RcePcg;
    cfg.lambda1 = 0.0;
    cfg.lambda2 = 0.0;
    let mut gated = Trainer::new(cfg, spec, source, tt, val).unwrap();
    for _ in 0..25 {
        let a = rce.step().unwrap();
        let b = gated.step().unwrap();
        assert_eq!(b.breakdown.grnd, 0.0);
        assert_eq!(b.breakdown.fid, 0.0);
        assert_eq!(a.breakdown.total.to_bits(), b.breakdown.total.to_bits());
    }
    assert_eq!(param_dump(&rce.state.model), param_dump(&gated.state.model));
}

#[test]
fn init_from_checkpoint_warm_starts_the_encoder() {
    let (source, tt, val, _) = task(7);
    let (cfg, spec) = config(Ablation::Rce, 7);
    let mut donor_trainer = Trainer::new(cfg.clone(), spec.clone(), source.clone(), tt.clone(), val.clone()).unwrap();
    for _ in 0..5 {
        donor_trainer.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("donor.ckpt");
    donor_trainer.state.model.save_checkpoint(&ckpt, 5, 0).unwrap();

    let mut sca_cfg = cfg;
    sca_cfg.ablation = Ablation::Sca;
    sca_cfg.init_from = Some(ckpt);
    sca_cfg.target_prototypes_per_class = 0;
    let warm = Trainer::new(sca_cfg, spec, source, tt, val).unwrap();
    assert_eq!(warm.state.bank.mu, 1.0);
    let mut donor_f = Vec::new();
    donor_trainer.state.model.visit_params(&mut |n, t| {
        if n.starts_with("f.") {
            donor_f.extend(t.data().iter().map(|v| v.to_bits()));
        }
    });
    let mut warm_f = Vec::new();
    let mut warm_h = Vec::new();
    warm.state.model.visit_params(&mut |n, t| {
        if n.starts_with("f.") {
            warm_f.extend(t.data().iter().map(|v| v.to_bits()));
        }
        if n.starts_with("h.") {
            warm_h.extend(t.data().iter().map(|v| v.to_bits()));
        }
    });
    assert_eq!(donor_f, warm_f, "F weights copied from the donor");
    let mut donor_h = Vec::new();
    donor_trainer.state.model.visit_params(&mut |n, t| {
        if n.starts_with("h.") {
            donor_h.extend(t.data().iter().map(|v| v.to_bits()));
        }
    });
    assert_ne!(donor_h, warm_h, "H stays freshly initialized");
}

#[test]
fn mlp_backbone_trains_end_to_end() {
    let (source, tt, val, _) = task(8);
    let (mut cfg, mut spec) = config(Ablation::RcePcgCcl, 8);
    spec.backbone = Backbone::Mlp;
    cfg.max_steps = 20;
    let mut trainer = Trainer::new(cfg, spec, source, tt, val).unwrap();
    let out = trainer.run().unwrap();
    assert_eq!(out.steps_run, 20);
    assert!(out.history.iter().all(|r| r.breakdown.is_finite()));
}

#[test]
fn ablate_reports_one_row_per_mode_deterministically() {
    let (source, tt, val, test) = task(5);
    let (mut cfg, spec) = config(Ablation::Rce, 5);
    cfg.max_steps = 30;
    cfg.eval_interval = 15;
    let rule = ExtractionRule::TopK { k: 1 };

    let single = ablate(&cfg, &spec, &[Ablation::Rce], &source, &tt, &val, &test, rule, 50, 0).unwrap();
    assert_eq!(single.rows.len(), 1);

    let modes = [Ablation::Rce, Ablation::RcePcg, Ablation::RcePcgCcl];
    let t1 = ablate(&cfg, &spec, &modes, &source, &tt, &val, &test, rule, 50, 0).unwrap();
    let t2 = ablate(&cfg, &spec, &modes, &source, &tt, &val, &test, rule, 50, 0).unwrap();
    assert_eq!(t1.rows.len(), 3);
    assert_eq!(
        serde_json::to_string(&t1).unwrap(),
        serde_json::to_string(&t2).unwrap()
    );
    let rendered = t1.render();
    for label in ["rce", "rcepcg", "rcepcgccl"] {
        assert!(rendered.contains(label), "{rendered}");
    }
}
