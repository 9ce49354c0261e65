use rce_core::data::{synth_two_domain, few_shot_split, split_fraction, Shift, Split, SynthSpec};
use rce_core::model::{Backbone, ModelSpec};
use rce_core::trainer::{Ablation, TrainConfig, Trainer};
use rce_core::augment::TransformPolicy;

fn main() {
    let spec = SynthSpec { n_classes: 4, samples_per_class: 200, target_samples_per_class: Some(60), shift: Shift::Invert, seed: 1 };
    let (source, target) = synth_two_domain(&spec).unwrap();
    let (tt, rest) = few_shot_split(&target, 3, 1).unwrap();
    let (val, _test) = split_fraction(&rest, 0.5, 1, Split::Val, Split::Test).unwrap();
    let mspec = ModelSpec { input_shape: (1,16,16), num_classes: 4, num_concepts: 4, concept_dim: 1, backbone: Backbone::SmallConv, seed: 1 };
    for (name, ablation) in [("rce", Ablation::Rce), ("full", Ablation::RcePcgCcl)] {
        let cfg = TrainConfig { ablation, seed: 1, max_steps: 10000, augmentation: TransformPolicy::simclr(2), ..TrainConfig::default() };
        let mut t = Trainer::new(cfg, mspec.clone(), source.clone(), tt.clone(), val.clone()).unwrap();
        let t0 = std::time::Instant::now();
        let n = 30;
        for _ in 0..n { t.step().unwrap(); }
        println!("{}: {:.1} ms/step", name, t0.elapsed().as_secs_f64()*1000.0/n as f64);
    }
    // eval cost
    let cfg = TrainConfig { ablation: Ablation::Rce, seed: 1, ..TrainConfig::default() };
    let t = Trainer::new(cfg, mspec, source, tt, val.clone()).unwrap();
    let t0 = std::time::Instant::now();
    let acc = rce_core::eval::accuracy(&t.state.model, &val, 0.5, 0.5).unwrap();
    println!("val eval ({} samples): {:.1} ms, acc {:.3}", val.len(), t0.elapsed().as_secs_f64()*1000.0, acc);
}
