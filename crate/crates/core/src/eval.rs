//! Evaluation: domain-adaptation accuracy, concept-set extraction, the
//! intra-class concept-overlap (IoU) fidelity score, prototype-based
//! explanations, and the ablation comparison harness.
//!
//! Concept importance is the relevance-weighted activation magnitude
//! `|(F(x) ⊙ H(x))_i|` (per-concept L2 norm when concepts have more than one
//! dimension). Concept indices are 0-based throughout. All ranking and argmax
//! ties break toward the lower index, so results are fully deterministic.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::hash;
use crate::model::{combine_logits, ModelSpec, RceModel};
use crate::tensor::Tensor;
use crate::trainer::{Ablation, TrainConfig, TrainOutcome, Trainer};

const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractionRule {
    /// The `k` concepts with the largest importance.
    TopK { k: usize },
    /// Concepts whose importance reaches `gamma` times the maximum.
    Threshold { gamma: f64 },
}

impl Default for ExtractionRule {
    fn default() -> Self {
        ExtractionRule::TopK { k: 5 }
    }
}

impl ExtractionRule {
    fn validate(&self, num_concepts: usize) -> Result<()> {
        match *self {
            ExtractionRule::TopK { k } => {
                if k == 0 || k > num_concepts {
                    return Err(Error::config(format!(
                        "top_k rule needs 1 <= k <= {num_concepts}, got {k}"
                    )));
                }
            }
            ExtractionRule::Threshold { gamma } => {
                if !(gamma > 0.0 && gamma <= 1.0) {
                    return Err(Error::config("threshold gamma must lie in (0, 1]"));
                }
            }
        }
        Ok(())
    }
}

/// Early validation hook for callers that want rule errors before any
/// training or compute starts.
pub fn validate_rule(rule: ExtractionRule, num_concepts: usize) -> Result<()> {
    rule.validate(num_concepts)
}

/// The concept subset a rule extracts for one sample (0-based indices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub member_indices: BTreeSet<usize>,
    pub rule: ExtractionRule,
}

/// Ranked prototype explanation for one query sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Explanation {
    pub query_index: usize,
    pub top_concept: usize,
    /// Dataset indices sorted by descending score.
    pub prototype_indices: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Per-concept importance from flattened concept/relevance rows.
fn importances(concepts: &[f64], relevances: &[f64], k: usize, d: usize) -> Vec<f64> {
    (0..k)
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..d {
                let v = concepts[i * d + j] * relevances[i * d + j];
                acc += v * v;
            }
            acc.sqrt()
        })
        .collect()
}

fn members_for(rule: ExtractionRule, imps: &[f64]) -> BTreeSet<usize> {
    match rule {
        ExtractionRule::TopK { k } => {
            let mut order: Vec<usize> = (0..imps.len()).collect();
            order.sort_by(|&a, &b| {
                imps[b]
                    .partial_cmp(&imps[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            order.into_iter().take(k).collect()
        }
        ExtractionRule::Threshold { gamma } => {
            let max = imps.iter().cloned().fold(0.0, f64::max);
            imps.iter()
                .enumerate()
                .filter(|(_, &v)| v >= gamma * max)
                .map(|(i, _)| i)
                .collect()
        }
    }
}

/// Importance matrix `[n, K]` over a dataset, computed in fixed-size chunks.
fn importance_matrix(model: &RceModel, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let spec = model.spec();
    let (k, d) = (spec.num_concepts, spec.concept_dim);
    let kd = k * d;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let batch = model.eval_outputs(chunk)?;
        for (crow, rrow) in batch
            .concepts
            .data()
            .chunks(kd)
            .zip(batch.relevances.data().chunks(kd))
        {
            out.push(importances(crow, rrow, k, d));
        }
    }
    Ok(out)
}

/// Fraction of samples whose weighted-score argmax equals the label.
/// Ties break toward the lower class index.
pub fn accuracy(model: &RceModel, ds: &DomainDataset, omega1: f64, omega2: f64) -> Result<f64> {
    if omega1 < 0.0 || omega2 < 0.0 {
        return Err(Error::config("prediction weights must be non-negative"));
    }
    if ds.is_empty() {
        return Err(Error::config("accuracy over an empty dataset"));
    }
    let n_classes = model.spec().num_classes;
    let mut correct = 0usize;
    let mut row = 0usize;
    for chunk in ds.images.chunks(EVAL_CHUNK) {
        let batch = model.eval_outputs(chunk)?;
        for i in 0..chunk.len() {
            let agg = &batch.aggregator_logits.data()[i * n_classes..(i + 1) * n_classes];
            let sel = &batch.selector_logits.data()[i * n_classes..(i + 1) * n_classes];
            let scores = combine_logits(agg, sel, omega1, omega2);
            if argmax(&scores) == ds.labels[row] {
                correct += 1;
            }
            row += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Concepts a rule considers active for one input.
pub fn concept_set(model: &RceModel, x: &Tensor, rule: ExtractionRule) -> Result<ConceptSet> {
    let spec = model.spec();
    rule.validate(spec.num_concepts)?;
    let out = model.forward(x)?;
    let imps = importances(
        out.concepts.data(),
        out.relevances.data(),
        spec.num_concepts,
        spec.concept_dim,
    );
    Ok(ConceptSet {
        member_indices: members_for(rule, &imps),
        rule,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FidelityReport {
    /// Mean same-class IoU per class; `None` for classes with fewer than two
    /// samples.
    pub per_class: Vec<Option<f64>>,
    /// Mean of the per-class means.
    pub overall: f64,
    pub rule: ExtractionRule,
    pub pairs_per_class: usize,
    pub seed: u64,
}

fn iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

pub(crate) fn fidelity_from_sets(
    sets: &[BTreeSet<usize>],
    labels: &[usize],
    num_classes: usize,
    pairs_per_class: usize,
    seed: u64,
) -> Result<(Vec<Option<f64>>, f64)> {
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let idxs: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect();
        if idxs.len() < 2 {
            per_class.push(None);
            continue;
        }
        let exhaustive = idxs.len() * (idxs.len() - 1) / 2;
        let mean = if exhaustive <= pairs_per_class {
            let mut acc = 0.0;
            for i in 0..idxs.len() {
                for j in (i + 1)..idxs.len() {
                    acc += iou(&sets[idxs[i]], &sets[idxs[j]]);
                }
            }
            acc / exhaustive as f64
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(hash::mix(&[seed, c as u64]));
            let mut acc = 0.0;
            for _ in 0..pairs_per_class {
                let a = rng.gen_range(0..idxs.len());
                let mut b = rng.gen_range(0..idxs.len() - 1);
                if b >= a {
                    b += 1;
                }
                acc += iou(&sets[idxs[a]], &sets[idxs[b]]);
            }
            acc / pairs_per_class as f64
        };
        per_class.push(Some(mean));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::config(
            "fidelity needs at least one class with two or more samples",
        ));
    }
    let overall = present.iter().sum::<f64>() / present.len() as f64;
    Ok((per_class, overall))
}

/// Intra-class concept-set IoU, exhaustively for small classes and over
/// `pairs_per_class` seeded pairs once exhaustive pairing exceeds the budget.
pub fn fidelity_score(
    model: &RceModel,
    ds: &DomainDataset,
    rule: ExtractionRule,
    pairs_per_class: usize,
    seed: u64,
) -> Result<FidelityReport> {
    rule.validate(model.spec().num_concepts)?;
    if pairs_per_class == 0 {
        return Err(Error::config("pairs_per_class must be >= 1"));
    }
    let imps = importance_matrix(model, &ds.images)?;
    let sets: Vec<BTreeSet<usize>> = imps.iter().map(|row| members_for(rule, row)).collect();
    let (per_class, overall) =
        fidelity_from_sets(&sets, &ds.labels, ds.num_classes, pairs_per_class, seed)?;
    Ok(FidelityReport {
        per_class,
        overall,
        rule,
        pairs_per_class,
        seed,
    })
}

/// Dataset samples ranked by the importance of one concept, best first.
pub fn top_prototypes(
    model: &RceModel,
    concept_index: usize,
    ds: &DomainDataset,
    top_k: usize,
) -> Result<Vec<(usize, f64)>> {
    let spec = model.spec();
    if concept_index >= spec.num_concepts {
        return Err(Error::config(format!(
            "concept index {concept_index} out of range for K = {}",
            spec.num_concepts
        )));
    }
    if top_k == 0 || top_k > ds.len() {
        return Err(Error::config(format!(
            "top_k must lie in 1..={}, got {top_k}",
            ds.len()
        )));
    }
    let imps = importance_matrix(model, &ds.images)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| {
        imps[b][concept_index]
            .partial_cmp(&imps[a][concept_index])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(order
        .into_iter()
        .take(top_k)
        .map(|i| (i, imps[i][concept_index]))
        .collect())
}

/// Prototype explanation for the dataset sample at `query_index`: picks the
/// query's highest-importance concept and ranks the dataset by it.
pub fn explain(
    model: &RceModel,
    ds: &DomainDataset,
    query_index: usize,
    top_k: usize,
) -> Result<Explanation> {
    if query_index >= ds.len() {
        return Err(Error::config(format!(
            "query index {query_index} out of range for dataset of {}",
            ds.len()
        )));
    }
    let spec = model.spec();
    let out = model.forward(&ds.images[query_index])?;
    let imps = importances(
        out.concepts.data(),
        out.relevances.data(),
        spec.num_concepts,
        spec.concept_dim,
    );
    let top_concept = argmax(&imps);
    let ranked = top_prototypes(model, top_concept, ds, top_k)?;
    let (prototype_indices, scores) = ranked.into_iter().unzip();
    Ok(Explanation {
        query_index,
        top_concept,
        prototype_indices,
        scores,
    })
}

// ---------------------------------------------------------------------------
// ablation comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub test_accuracy: f64,
    pub fidelity_overall: f64,
    pub fidelity_per_class: Vec<Option<f64>>,
    pub steps_run: u64,
    pub best_val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub rule: ExtractionRule,
    pub fidelity_pairs_per_class: usize,
    pub fidelity_seed: u64,
}

impl AblationTable {
    /// Plain-text rendering, one row per setting.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:>10} {:>10} {:>8}   rule {:?}\n",
            "ablation", "accuracy", "fidelity", "steps", self.rule
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<14} {:>10.4} {:>10.4} {:>8}\n",
                format!("{:?}", r.ablation).to_lowercase(),
                r.test_accuracy,
                r.fidelity_overall,
                r.steps_run
            ));
        }
        out
    }
}

/// Trains one configuration per ablation mode (identical otherwise) and
/// reports target-test accuracy and fidelity for each.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    base: &TrainConfig,
    spec: &ModelSpec,
    modes: &[Ablation],
    source: &DomainDataset,
    target_train: &DomainDataset,
    val: &DomainDataset,
    test: &DomainDataset,
    rule: ExtractionRule,
    fidelity_pairs_per_class: usize,
    fidelity_seed: u64,
) -> Result<AblationTable> {
    if modes.is_empty() {
        return Err(Error::config("ablation comparison needs at least one mode"));
    }
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut cfg = base.clone();
        cfg.ablation = mode;
        let outcome = run_training(cfg.clone(), spec.clone(), source, target_train, val)?;
        let test_accuracy = accuracy(&outcome.model, test, cfg.omega1, cfg.omega2)?;
        let fid = fidelity_score(&outcome.model, test, rule, fidelity_pairs_per_class, fidelity_seed)?;
        rows.push(AblationRow {
            ablation: mode,
            test_accuracy,
            fidelity_overall: fid.overall,
            fidelity_per_class: fid.per_class,
            steps_run: outcome.steps_run,
            best_val_accuracy: outcome.best_val_accuracy,
        });
    }
    Ok(AblationTable {
        rows,
        rule,
        fidelity_pairs_per_class,
        fidelity_seed,
    })
}

/// Convenience wrapper: build a trainer and run it to completion.
pub fn run_training(
    config: TrainConfig,
    spec: ModelSpec,
    source: &DomainDataset,
    target_train: &DomainDataset,
    val: &DomainDataset,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(
        config,
        spec,
        source.clone(),
        target_train.clone(),
        val.clone(),
    )?;
    trainer.run()
}

/// Writes the listed samples side by side as one upscaled PNG strip.
pub fn write_prototype_grid(ds: &DomainDataset, indices: &[usize], path: &std::path::Path) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::config("prototype grid needs at least one sample"));
    }
    let (c, h, w) = ds.shape;
    const SCALE: usize = 8;
    const GAP: usize = 2;
    let tile_w = w * SCALE;
    let tile_h = h * SCALE;
    let total_w = indices.len() * tile_w + (indices.len() - 1) * GAP;
    let mut img = image::RgbImage::from_pixel(total_w as u32, tile_h as u32, image::Rgb([40, 40, 40]));
    for (slot, &idx) in indices.iter().enumerate() {
        if idx >= ds.len() {
            return Err(Error::config(format!("grid index {idx} out of range")));
        }
        let data = ds.images[idx].data();
        let x_off = slot * (tile_w + GAP);
        for y in 0..tile_h {
            for x in 0..tile_w {
                let (sy, sx) = (y / SCALE, x / SCALE);
                let px = if c == 3 {
                    let n = h * w;
                    [
                        (data[sy * w + sx] * 255.0) as u8,
                        (data[n + sy * w + sx] * 255.0) as u8,
                        (data[2 * n + sy * w + sx] * 255.0) as u8,
                    ]
                } else {
                    let v = (data[sy * w + sx] * 255.0) as u8;
                    [v, v, v]
                };
                img.put_pixel((x_off + x) as u32, y as u32, image::Rgb(px));
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::data(format!("cannot write grid '{}': {e}", path.display())))?;
    Ok(())
}
