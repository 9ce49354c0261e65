use rce_core::data::{synth_two_domain, few_shot_split, split_fraction, Shift, Split, SynthSpec};
use rce_core::eval::{accuracy, fidelity_score, ExtractionRule};
use rce_core::model::{Backbone, ModelSpec};
use rce_core::trainer::{Ablation, TrainConfig, Trainer};
use rce_core::augment::TransformPolicy;

fn main() {
    for seed in [11u64, 12, 13, 14] {
        let spec = SynthSpec { n_classes: 4, samples_per_class: 200, target_samples_per_class: Some(120), shift: Shift::Invert, seed };
        let (source, target) = synth_two_domain(&spec).unwrap();
        let (tt, rest) = few_shot_split(&target, 3, seed).unwrap();
        let (val, test) = split_fraction(&rest, 0.5, seed, Split::Val, Split::Test).unwrap();
        let mspec = ModelSpec { input_shape: (1,16,16), num_classes: 4, num_concepts: 8, concept_dim: 1, backbone: Backbone::SmallConv, seed };
        for (name, ablation) in [("rce ", Ablation::Rce), ("full", Ablation::RcePcgCcl)] {
            let mut aug = TransformPolicy::simclr(2);
            aug.strengths.crop_scale_min = 0.5;
            let cfg = TrainConfig { ablation, seed, max_steps: 3000, lambda2: 0.3,
                early_stop_patience: 30, augmentation: aug, ..TrainConfig::default() };
            let t0 = std::time::Instant::now();
            let mut t = Trainer::new(cfg, mspec.clone(), source.clone(), tt.clone(), val.clone()).unwrap();
            let out = t.run().unwrap();
            let acc = accuracy(&out.model, &test, 0.5, 0.5).unwrap();
            let f = |k: usize| fidelity_score(&out.model, &test, ExtractionRule::TopK { k }, 100, seed).unwrap().overall;
            println!("seed {seed} {name}: steps {:5} acc {:.3} | fid t2 {:.3} t4 {:.3}  ({:.0}s)",
                out.steps_run, acc, f(2), f(4), t0.elapsed().as_secs_f64());
        }
    }
    println!("CAL6_DONE");
}
