//! Objective terms: reconstruction + sparsity, prediction cross-entropy,
//! contrastive concept loss, prototype grounding, concept fidelity, and the
//! codebook-supervision term used by source-only concept alignment.
//!
//! Each term exists twice on purpose: a plain-`f64` evaluation used by public
//! APIs and tests, and a tape builder (`graph_*`) the trainer differentiates.
//! Unit tests pin the two routes against each other on random inputs.
//!
//! Conventions: all reductions are means (over batch, positives, pixels);
//! the L1 sparsity norm is a sum over the flattened concept vector; the
//! contrastive denominator includes the positive term, which keeps the loss
//! non-negative; fidelity is a squared distance so minimizing it increases
//! similarity.

use serde::{Deserialize, Serialize};

use crate::bank::ConceptBank;
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::model::{combine_logits, ForwardOutput};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Cosine,
    Dot,
}

/// Anchor embedding plus positive/negative embedding sets, all flattened
/// concept vectors of equal length.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

impl ContrastiveBatch {
    pub fn validate(&self) -> Result<()> {
        if self.positives.is_empty() || self.negatives.is_empty() {
            return Err(Error::config(
                "contrastive batch needs at least one positive and one negative",
            ));
        }
        let len = self.anchor.len();
        if len == 0 {
            return Err(Error::config("contrastive embeddings must be non-empty"));
        }
        for v in self.positives.iter().chain(&self.negatives) {
            if v.len() != len {
                return Err(Error::config(format!(
                    "contrastive embedding length mismatch: {} vs {}",
                    v.len(),
                    len
                )));
            }
        }
        Ok(())
    }
}

/// The scalar weights a breakdown was computed with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightsUsed {
    pub lambda: f64,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub epsilon: f64,
}

/// Raw (unweighted) term values plus the composed total:
/// `total = pred + rec + beta*(ssl + lambda1*grnd + lambda2*fid) + code`,
/// where `code` is the already-epsilon-scaled codebook term (zero outside
/// source-only alignment runs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pred: f64,
    pub rec: f64,
    pub ssl: f64,
    pub grnd: f64,
    pub fid: f64,
    pub code: f64,
    pub total: f64,
    pub weights_used: WeightsUsed,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.pred, self.rec, self.ssl, self.grnd, self.fid, self.code, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Composes the total from raw terms under the given weights.
pub fn compose_total(
    pred: f64,
    rec: f64,
    ssl: f64,
    grnd: f64,
    fid: f64,
    code: f64,
    weights: WeightsUsed,
) -> LossBreakdown {
    let total = pred
        + rec
        + weights.beta * (ssl + weights.lambda1 * grnd + weights.lambda2 * fid)
        + code;
    LossBreakdown {
        pred,
        rec,
        ssl,
        grnd,
        fid,
        code,
        total,
        weights_used: weights,
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

/// Reconstruction MSE plus L1 sparsity on the flattened concepts:
/// `mse(x, recon) + lambda * sum|concepts|`.
pub fn reconstruction_sparsity(
    x: &Tensor,
    reconstruction: &Tensor,
    concepts: &Tensor,
    lambda: f64,
) -> Result<f64> {
    if x.shape() != reconstruction.shape() {
        return Err(Error::config(format!(
            "reconstruction shape {:?} does not match input {:?}",
            reconstruction.shape(),
            x.shape()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::config("sparsity weight must be non-negative"));
    }
    let l1: f64 = concepts.data().iter().map(|v| v.abs()).sum();
    Ok(mse(x.data(), reconstruction.data()) + lambda * l1)
}

fn similarity(a: &[f64], b: &[f64], kind: Similarity) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    match kind {
        Similarity::Dot => Ok(dot),
        Similarity::Cosine => {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::config(
                    "degenerate embedding: zero-norm vector in cosine similarity",
                ));
            }
            Ok(dot / (na * nb))
        }
    }
}

/// Temperature-scaled contrastive loss, averaged over positives:
/// `-log( exp(s+/tau) / (exp(s+/tau) + sum_j exp(s-_j/tau)) )`,
/// stabilized by max subtraction before exponentiation.
pub fn contrastive_loss(batch: &ContrastiveBatch, tau: f64, sim: Similarity) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::config("temperature must be positive"));
    }
    batch.validate()?;
    let neg_sims: Vec<f64> = batch
        .negatives
        .iter()
        .map(|n| similarity(&batch.anchor, n, sim).map(|s| s / tau))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for pos in &batch.positives {
        let sp = similarity(&batch.anchor, pos, sim)? / tau;
        let m = neg_sims.iter().cloned().fold(sp, f64::max);
        let denom: f64 = (sp - m).exp() + neg_sims.iter().map(|s| (s - m).exp()).sum::<f64>();
        total += m + denom.ln() - sp;
    }
    Ok(total / batch.positives.len() as f64)
}

/// Mean squared error between a concept vector and its class prototype.
pub fn grounding_loss(concepts: &[f64], prototype: &[f64]) -> Result<f64> {
    if concepts.len() != prototype.len() {
        return Err(Error::config(format!(
            "grounding length mismatch: {} vs {}",
            concepts.len(),
            prototype.len()
        )));
    }
    Ok(mse(concepts, prototype))
}

/// Same-class pairs contribute their mean squared concept distance;
/// different-class pairs contribute nothing.
pub fn fidelity_loss(concepts_i: &[f64], concepts_j: &[f64], labels_equal: bool) -> Result<f64> {
    if concepts_i.len() != concepts_j.len() {
        return Err(Error::config(format!(
            "fidelity length mismatch: {} vs {}",
            concepts_i.len(),
            concepts_j.len()
        )));
    }
    if !labels_equal {
        return Ok(0.0);
    }
    Ok(mse(concepts_i, concepts_j))
}

/// `epsilon * mse(concepts, code)`: the grounding kernel scaled for the
/// source-only supervised-alignment mode.
pub fn codebook_supervision_loss(concepts: &[f64], code: &[f64], epsilon: f64) -> Result<f64> {
    if epsilon < 0.0 {
        return Err(Error::config("codebook supervision weight must be non-negative"));
    }
    if epsilon == 0.0 {
        return Ok(0.0);
    }
    Ok(epsilon * grounding_loss(concepts, code)?)
}

/// Stable single-sample softmax cross-entropy over class scores.
pub fn cross_entropy(scores: &[f64], label: usize) -> Result<f64> {
    if label >= scores.len() {
        return Err(Error::config(format!(
            "unknown label {label} for {} classes",
            scores.len()
        )));
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores.iter().map(|&z| (z - m).exp()).sum::<f64>().ln() + m;
    Ok(lse - scores[label])
}

/// Term gates for one composite evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub weights: WeightsUsed,
    pub similarity: Similarity,
    /// Contrastive concept learning term active.
    pub ccl_enabled: bool,
    /// Prototype grounding + fidelity terms active.
    pub pcg_enabled: bool,
    /// Source-only codebook supervision mode (replaces the CL block).
    pub sca_enabled: bool,
}

/// Per-sample inputs beyond the forward pass itself.
pub struct SampleLossInputs<'a> {
    pub x: &'a Tensor,
    pub label: usize,
    /// Contrastive embeddings for this anchor, when CCL is active.
    pub contrastive: Option<&'a ContrastiveBatch>,
    /// Flattened concept vectors of same-class batch partners.
    pub same_class_partners: &'a [Vec<f64>],
}

/// Composite loss for one sample. Disabled terms are exactly zero.
pub fn total_loss(
    forward: &ForwardOutput,
    inputs: &SampleLossInputs,
    bank: Option<&ConceptBank>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let w = cfg.weights;
    let scores = combine_logits(
        &forward.aggregator_logits,
        &forward.selector_logits,
        w.omega1,
        w.omega2,
    );
    let pred = cross_entropy(&scores, inputs.label)?;
    let concepts_flat = forward.concepts.data();
    let rec = reconstruction_sparsity(
        inputs.x,
        &forward.reconstruction,
        &forward.concepts,
        w.lambda,
    )?;
    let ssl = match (cfg.ccl_enabled, inputs.contrastive) {
        (true, Some(batch)) => contrastive_loss(batch, w.tau, cfg.similarity)?,
        _ => 0.0,
    };
    let grnd = if cfg.pcg_enabled {
        match bank {
            Some(b) => grounding_loss(concepts_flat, &b.lookup(inputs.label)?)?,
            None => 0.0,
        }
    } else {
        0.0
    };
    let fid = if cfg.pcg_enabled && !inputs.same_class_partners.is_empty() {
        let mut acc = 0.0;
        for partner in inputs.same_class_partners {
            acc += fidelity_loss(concepts_flat, partner, true)?;
        }
        acc / inputs.same_class_partners.len() as f64
    } else {
        0.0
    };
    let code = if cfg.sca_enabled {
        match bank {
            Some(b) => codebook_supervision_loss(concepts_flat, &b.lookup(inputs.label)?, w.epsilon)?,
            None => 0.0,
        }
    } else {
        0.0
    };
    Ok(compose_total(pred, rec, ssl, grnd, fid, code, w))
}

// ---------------------------------------------------------------------------
// Tape builders (the differentiable route used by the trainer).
// ---------------------------------------------------------------------------

/// Mean squared difference over all elements of two equally shaped vars.
pub fn graph_mse(g: &mut Graph, a: VarId, b: VarId) -> VarId {
    let d = g.sub(a, b);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

/// Batch Eq-2 term: pixel-mean MSE plus `lambda * mean_batch(sum|concepts|)`.
pub fn graph_rec_sparsity(
    g: &mut Graph,
    x: VarId,
    reconstruction: VarId,
    concepts: VarId,
    lambda: f64,
) -> VarId {
    let mse = graph_mse(g, x, reconstruction);
    if lambda == 0.0 {
        return mse;
    }
    let batch = g.value(concepts).shape()[0];
    let l1 = g.l1_all(concepts);
    let l1_mean = g.scale(l1, lambda / batch as f64);
    g.add(mse, l1_mean)
}

/// Contrastive term for one anchor var against positive/negative vars.
pub fn graph_contrastive(
    g: &mut Graph,
    anchor: VarId,
    positives: &[VarId],
    negatives: &[VarId],
    tau: f64,
    sim: Similarity,
) -> Result<VarId> {
    if tau <= 0.0 {
        return Err(Error::config("temperature must be positive"));
    }
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::config(
            "contrastive batch needs at least one positive and one negative",
        ));
    }
    let sim_node = |g: &mut Graph, a: VarId, b: VarId| -> Result<VarId> {
        match sim {
            Similarity::Cosine => g.cosine_sim(a, b),
            Similarity::Dot => {
                let prod = g.mul(a, b);
                Ok(g.sum_all(prod))
            }
        }
    };
    let neg_sims: Vec<VarId> = negatives
        .iter()
        .map(|&n| {
            let s = sim_node(g, anchor, n)?;
            Ok(g.scale(s, 1.0 / tau))
        })
        .collect::<Result<_>>()?;
    let mut per_pos = Vec::with_capacity(positives.len());
    for &p in positives {
        let sp = sim_node(g, anchor, p)?;
        let sp = g.scale(sp, 1.0 / tau);
        let mut items = vec![sp];
        items.extend_from_slice(&neg_sims);
        let stacked = g.stack_scalars(&items);
        let lse = g.logsumexp(stacked);
        per_pos.push(g.sub(lse, sp));
    }
    let sum = g.sum_scalars(&per_pos);
    Ok(g.scale(sum, 1.0 / per_pos.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn weights() -> WeightsUsed {
        WeightsUsed {
            lambda: 1e-5,
            tau: 0.5,
            lambda1: 0.1,
            lambda2: 0.1,
            beta: 1.0,
            omega1: 0.5,
            omega2: 0.5,
            epsilon: 1.0,
        }
    }

    #[test]
    fn reconstruction_perfect_and_scalar_oracle() {
        let x = Tensor::from_vec(vec![1.0, 0.0]);
        assert_eq!(
            reconstruction_sparsity(&x, &x, &Tensor::from_vec(vec![0.0, 0.0]), 0.5).unwrap(),
            0.0
        );
        // MSE([1,0],[0,0]) = 0.5; L1([2,-1]) = 3; 0.5 + 0.1*3 = 0.8.
        let recon = Tensor::from_vec(vec![0.0, 0.0]);
        let concepts = Tensor::from_vec(vec![2.0, -1.0]);
        let v = reconstruction_sparsity(&x, &recon, &concepts, 0.1).unwrap();
        assert!((v - 0.8).abs() < 1e-12);
        // lambda = 0 reduces to plain MSE.
        let v0 = reconstruction_sparsity(&x, &recon, &concepts, 0.0).unwrap();
        assert!((v0 - 0.5).abs() < 1e-12);
        // Shape mismatch is a contract error.
        assert!(reconstruction_sparsity(&x, &concepts.reshaped(&[2, 1]).unwrap(), &concepts, 0.1).is_err());
    }

    #[test]
    fn contrastive_closed_forms() {
        // Equal similarities with one negative force probability 1/2.
        let b = ContrastiveBatch {
            anchor: vec![1.0, 0.0],
            positives: vec![vec![2.0, 0.0]],
            negatives: vec![vec![3.0, 0.0]],
        };
        let v = contrastive_loss(&b, 0.5, Similarity::Cosine).unwrap();
        assert!((v - 2.0f64.ln()).abs() < 1e-9);

        // All similarities equal with m negatives: ln(1 + m).
        for m in [1usize, 2, 8] {
            let b = ContrastiveBatch {
                anchor: vec![1.0, 1.0],
                positives: vec![vec![0.5, 0.5]],
                negatives: vec![vec![2.0, 2.0]; m],
            };
            let v = contrastive_loss(&b, 0.7, Similarity::Cosine).unwrap();
            assert!(
                (v - (1.0 + m as f64).ln()).abs() < 1e-9,
                "m={m}: {v} vs {}",
                (1.0 + m as f64).ln()
            );
        }

        // s+=1, s-=0, tau=0.5: -log(e^2 / (e^2 + 1)) = ln(1 + e^-2).
        let b = ContrastiveBatch {
            anchor: vec![1.0, 0.0],
            positives: vec![vec![1.0, 0.0]],
            negatives: vec![vec![0.0, 1.0]],
        };
        let v = contrastive_loss(&b, 0.5, Similarity::Cosine).unwrap();
        assert!((v - 0.126928011042972).abs() < 1e-6, "{v}");
    }

    #[test]
    fn contrastive_errors_and_permutation_invariance() {
        let b = ContrastiveBatch {
            anchor: vec![1.0, 0.0],
            positives: vec![vec![1.0, 1.0]],
            negatives: vec![vec![0.2, 0.4], vec![0.9, 0.1], vec![0.3, 0.3]],
        };
        assert!(contrastive_loss(&b, 0.0, Similarity::Cosine).is_err());
        assert!(contrastive_loss(&b, -1.0, Similarity::Cosine).is_err());
        let zero = ContrastiveBatch {
            anchor: vec![0.0, 0.0],
            positives: vec![vec![1.0, 1.0]],
            negatives: vec![vec![1.0, 0.0]],
        };
        assert!(contrastive_loss(&zero, 0.5, Similarity::Cosine).is_err());

        let base = contrastive_loss(&b, 0.5, Similarity::Cosine).unwrap();
        let mut perm = b.clone();
        perm.negatives.rotate_left(1);
        let v = contrastive_loss(&perm, 0.5, Similarity::Cosine).unwrap();
        assert!((base - v).abs() < 1e-12);
    }

    #[test]
    fn grounding_fidelity_codebook_oracles() {
        assert_eq!(grounding_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((grounding_loss(&[1.0, 1.0], &[0.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        // Homogeneity: scaling both vectors by c scales the loss by c^2.
        let l1 = grounding_loss(&[1.0, -2.0], &[0.5, 0.5]).unwrap();
        let l3 = grounding_loss(&[3.0, -6.0], &[1.5, 1.5]).unwrap();
        assert!((l3 - 9.0 * l1).abs() < 1e-9);

        assert_eq!(fidelity_loss(&[1.0, 2.0], &[1.0, 2.0], true).unwrap(), 0.0);
        assert_eq!(fidelity_loss(&[1.0, 2.0], &[9.0, -9.0], false).unwrap(), 0.0);
        assert!((fidelity_loss(&[1.0, 0.0], &[0.0, 1.0], true).unwrap() - 1.0).abs() < 1e-12);
        assert!(fidelity_loss(&[1.0], &[1.0, 2.0], true).is_err());

        assert_eq!(codebook_supervision_loss(&[1.0], &[5.0], 0.0).unwrap(), 0.0);
        assert_eq!(codebook_supervision_loss(&[1.0, 1.0], &[1.0, 1.0], 3.0).unwrap(), 0.0);
        let v = codebook_supervision_loss(&[1.0, 1.0], &[0.0, 0.0], 2.0).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        assert!(codebook_supervision_loss(&[1.0], &[0.0], -1.0).is_err());
    }

    #[test]
    fn compose_total_scalar_oracle_and_gates() {
        let mut w = weights();
        w.beta = 0.5;
        let b = compose_total(1.0, 2.0, 3.0, 4.0, 5.0, 0.0, w);
        assert!((b.total - 4.95).abs() < 1e-12);

        // beta = 0 leaves exactly pred + rec.
        let mut w0 = weights();
        w0.beta = 0.0;
        let b0 = compose_total(1.5, 2.5, 3.0, 4.0, 5.0, 0.0, w0);
        assert_eq!(b0.total, 4.0);

        // lambda1 = lambda2 = 0 with beta = 1 leaves pred + rec + ssl.
        let mut w1 = weights();
        w1.lambda1 = 0.0;
        w1.lambda2 = 0.0;
        let b1 = compose_total(1.0, 2.0, 3.0, 4.0, 5.0, 0.0, w1);
        assert_eq!(b1.total, 6.0);

        // Breakdown invariant holds for random terms.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let w = WeightsUsed {
                lambda: rng.gen_range(0.0..1.0),
                tau: 0.5,
                lambda1: rng.gen_range(0.0..1.0),
                lambda2: rng.gen_range(0.0..1.0),
                beta: rng.gen_range(0.0..2.0),
                omega1: 0.5,
                omega2: 0.5,
                epsilon: rng.gen_range(0.0..2.0),
            };
            let (p, r, s, gd, f, c) = (
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..3.0),
            );
            let b = compose_total(p, r, s, gd, f, c, w);
            let expect = p + r + w.beta * (s + w.lambda1 * gd + w.lambda2 * f) + c;
            assert!((b.total - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_rejects_unknown_label() {
        assert!(cross_entropy(&[0.0, 1.0], 2).is_err());
        let v = cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((v - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn graph_and_plain_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = Tensor::new(vec![1, 2, 3, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let r = Tensor::new(vec![1, 2, 3, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let c = Tensor::new(vec![1, 6], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let lambda = rng.gen_range(0.0..0.3);

            let plain = reconstruction_sparsity(
                &x.reshaped(&[2, 3, 4]).unwrap(),
                &r.reshaped(&[2, 3, 4]).unwrap(),
                &c.reshaped(&[6]).unwrap(),
                lambda,
            )
            .unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let rv = g.constant(r.clone());
            let cv = g.constant(c.clone());
            let node = graph_rec_sparsity(&mut g, xv, rv, cv, lambda);
            assert!((g.value(node).item() - plain).abs() < 1e-12);

            let anchor: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pos: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let neg: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let batch = ContrastiveBatch {
                anchor: anchor.clone(),
                positives: pos.clone(),
                negatives: neg.clone(),
            };
            let plain = contrastive_loss(&batch, 0.5, Similarity::Cosine).unwrap();
            let mut g = Graph::new();
            let av = g.constant(Tensor::from_vec(anchor));
            let pv: Vec<VarId> = pos.into_iter().map(|p| g.constant(Tensor::from_vec(p))).collect();
            let nv: Vec<VarId> = neg.into_iter().map(|n| g.constant(Tensor::from_vec(n))).collect();
            let node = graph_contrastive(&mut g, av, &pv, &nv, 0.5, Similarity::Cosine).unwrap();
            assert!((g.value(node).item() - plain).abs() < 1e-10);
        }
    }

    #[test]
    fn nonnegativity_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            assert!(grounding_loss(&a, &b).unwrap() >= 0.0);
            assert!(fidelity_loss(&a, &b, true).unwrap() >= 0.0);
            assert!(codebook_supervision_loss(&a, &b, 0.7).unwrap() >= 0.0);
            let batch = ContrastiveBatch {
                anchor: vec![1.0, rng.gen_range(-1.0..1.0)],
                positives: vec![vec![1.0, rng.gen_range(-1.0..1.0)]],
                negatives: vec![vec![1.0, rng.gen_range(-1.0..1.0)], vec![1.0, 0.3]],
            };
            // Denominator includes the positive, so the loss cannot go negative.
            assert!(contrastive_loss(&batch, 0.5, Similarity::Cosine).unwrap() >= 0.0);
        }
    }
}
