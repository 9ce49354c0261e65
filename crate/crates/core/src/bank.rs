//! Per-class concept prototype bank.
//!
//! A fixed, seed-sampled handful of source and target samples per class is
//! frozen at training start; after every step the bank is recomputed from
//! scratch on those samples with the current encoder:
//! `C_c = mu * mean_{x in S^s_c} F(x) + (1 - mu) * mean_{x in S^t_c} F(x)`.
//! `mu = 1` reproduces the source-only codebook exactly (bit-for-bit), and
//! symmetrically for `mu = 0`. Banks are replaced wholesale between steps, so
//! readers never observe a partial update.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::hash;
use crate::model::{ByteReader, RceModel};

/// Frozen per-class dataset indices used for prototype refreshes.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PrototypeSets {
    /// `source[c]` = indices into the source dataset for class `c`.
    pub source: Vec<Vec<usize>>,
    /// `target[c]` = indices into the target dataset (may be empty per class
    /// when the bank is source-only).
    pub target: Vec<Vec<usize>>,
}

/// Samples `per_class_source` source and `per_class_target` target indices
/// per class, without replacement, deterministically in `seed`.
pub fn sample_prototype_sets(
    source: &DomainDataset,
    target: &DomainDataset,
    per_class_source: usize,
    per_class_target: usize,
    seed: u64,
) -> Result<PrototypeSets> {
    if per_class_source == 0 {
        return Err(Error::config("per_class_source must be >= 1"));
    }
    let n_classes = source.num_classes;
    let mut src = Vec::with_capacity(n_classes);
    let mut tgt = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        src.push(draw_class(source, c, per_class_source, hash::mix(&[seed, c as u64, 0]))?);
        tgt.push(if per_class_target == 0 {
            Vec::new()
        } else {
            draw_class(target, c, per_class_target, hash::mix(&[seed, c as u64, 1]))?
        });
    }
    Ok(PrototypeSets {
        source: src,
        target: tgt,
    })
}

fn draw_class(ds: &DomainDataset, class: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    let mut indices: Vec<usize> = ds
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class)
        .map(|(i, _)| i)
        .collect();
    if indices.len() < count {
        return Err(Error::data(format!(
            "class {class} has {} samples in '{}', needs {count} for prototype sampling",
            indices.len(),
            ds.domain_tag
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let mut chosen: Vec<usize> = indices.into_iter().take(count).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Per-class grounding prototypes with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    prototypes: Vec<Vec<f64>>, // indexed by class id
    pub mu: f64,
    pub last_update_step: u64,
    pub class_ids: Vec<usize>,
    pub num_concepts: usize,
    pub concept_dim: usize,
    pub config_hash: u64,
}

impl ConceptBank {
    pub fn zeroed(num_classes: usize, num_concepts: usize, concept_dim: usize, mu: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::config("bank mix mu must lie in [0, 1]"));
        }
        Ok(ConceptBank {
            prototypes: vec![vec![0.0; num_concepts * concept_dim]; num_classes],
            mu,
            last_update_step: 0,
            class_ids: (0..num_classes).collect(),
            num_concepts,
            concept_dim,
            config_hash: 0,
        })
    }

    pub fn concept_len(&self) -> usize {
        self.num_concepts * self.concept_dim
    }

    /// Prototype for a class, by value; the bank itself stays immutable.
    pub fn lookup(&self, class_id: usize) -> Result<Vec<f64>> {
        let pos = self
            .class_ids
            .iter()
            .position(|&c| c == class_id)
            .ok_or_else(|| Error::config(format!("unknown class {class_id} in concept bank")))?;
        Ok(self.prototypes[pos].clone())
    }

    pub fn is_finite(&self) -> bool {
        self.prototypes
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn set_prototype(&mut self, class_id: usize, values: Vec<f64>) -> Result<()> {
        if values.len() != self.concept_len() {
            return Err(Error::config(format!(
                "prototype length {} does not match K*d = {}",
                values.len(),
                self.concept_len()
            )));
        }
        let pos = self
            .class_ids
            .iter()
            .position(|&c| c == class_id)
            .ok_or_else(|| Error::config(format!("unknown class {class_id} in concept bank")))?;
        self.prototypes[pos] = values;
        Ok(())
    }
}

/// Recomputes every class prototype from the frozen sets with the current
/// encoder parameters. Runs in eval mode; prototypes are constants within a
/// training step unless the trainer opts into gradient flow separately.
pub fn update_bank(
    bank: &ConceptBank,
    model: &RceModel,
    sets: &PrototypeSets,
    source: &DomainDataset,
    target: &DomainDataset,
    step: u64,
) -> Result<ConceptBank> {
    if step == 0 {
        return Err(Error::config(
            "bank update at step 0: prototype grounding starts after the first step",
        ));
    }
    let n_classes = bank.class_ids.len();
    if sets.source.len() != n_classes || sets.target.len() != n_classes {
        return Err(Error::config("prototype sets do not cover every class"));
    }
    let kd = bank.concept_len();
    let mut prototypes = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let src_mean = class_mean(model, source, &sets.source[c], kd)?;
        let proto = if bank.mu == 1.0 {
            src_mean.ok_or_else(|| Error::data(format!("class {c}: empty source prototype set")))?
        } else {
            let tgt_mean = class_mean(model, target, &sets.target[c], kd)?
                .ok_or_else(|| Error::data(format!(
                    "class {c}: empty target prototype set with mu = {} < 1",
                    bank.mu
                )))?;
            if bank.mu == 0.0 {
                tgt_mean
            } else {
                let src = src_mean
                    .ok_or_else(|| Error::data(format!("class {c}: empty source prototype set")))?;
                src.iter()
                    .zip(&tgt_mean)
                    .map(|(s, t)| bank.mu * s + (1.0 - bank.mu) * t)
                    .collect()
            }
        };
        prototypes.push(proto);
    }
    let out = ConceptBank {
        prototypes,
        mu: bank.mu,
        last_update_step: step,
        class_ids: bank.class_ids.clone(),
        num_concepts: bank.num_concepts,
        concept_dim: bank.concept_dim,
        config_hash: bank.config_hash,
    };
    if !out.is_finite() {
        return Err(Error::data("bank update produced non-finite prototypes"));
    }
    Ok(out)
}

fn class_mean(
    model: &RceModel,
    ds: &DomainDataset,
    indices: &[usize],
    kd: usize,
) -> Result<Option<Vec<f64>>> {
    if indices.is_empty() {
        return Ok(None);
    }
    let images: Vec<_> = indices.iter().map(|&i| ds.images[i].clone()).collect();
    let concepts = model.eval_concepts(&images)?;
    debug_assert_eq!(concepts.shape(), &[indices.len(), kd]);
    let mut mean = vec![0.0; kd];
    for row in concepts.data().chunks(kd) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = indices.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(Some(mean))
}

// ---------------------------------------------------------------------------
// codebook file: little-endian header + one record per class
// ---------------------------------------------------------------------------

const BANK_MAGIC: &[u8; 8] = b"RCEBANK1";
const BANK_VERSION: u32 = 1;

/// Layout: magic, version u32, N u32, K u32, d u32, mu f64, step u64,
/// config_hash u64, then N records of (class_id u32, K*d little-endian f64).
pub fn save_bank(bank: &ConceptBank, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(BANK_MAGIC);
    buf.extend_from_slice(&BANK_VERSION.to_le_bytes());
    buf.extend_from_slice(&(bank.class_ids.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(bank.num_concepts as u32).to_le_bytes());
    buf.extend_from_slice(&(bank.concept_dim as u32).to_le_bytes());
    buf.extend_from_slice(&bank.mu.to_le_bytes());
    buf.extend_from_slice(&bank.last_update_step.to_le_bytes());
    buf.extend_from_slice(&bank.config_hash.to_le_bytes());
    for (cid, proto) in bank.class_ids.iter().zip(&bank.prototypes) {
        buf.extend_from_slice(&(*cid as u32).to_le_bytes());
        for v in proto {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<ConceptBank> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    let magic = r.take(8, "bank magic")?;
    if magic != BANK_MAGIC {
        return Err(Error::data(format!(
            "codebook magic mismatch at offset 0 (got {magic:02x?})"
        )));
    }
    let version = r.u32("bank version")?;
    if version != BANK_VERSION {
        return Err(Error::data(format!("unsupported codebook version {version}")));
    }
    let n = r.u32("class count")? as usize;
    let k = r.u32("num_concepts")? as usize;
    let d = r.u32("concept_dim")? as usize;
    let mu = r.f64("mu")?;
    let step = r.u64("step")?;
    let config_hash = r.u64("config hash")?;
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::data(format!("codebook mu {mu} outside [0, 1]")));
    }
    if k == 0 || d == 0 {
        return Err(Error::data("codebook header has zero concept dims"));
    }
    let kd = k * d;
    let mut class_ids = Vec::with_capacity(n);
    let mut prototypes = Vec::with_capacity(n);
    for rec in 0..n {
        let cid = r
            .u32(&format!("class id of record {rec}"))
            .map_err(|e| Error::data(format!("prototype record {rec}: {e}")))?;
        let mut proto = Vec::with_capacity(kd);
        for j in 0..kd {
            let v = r
                .f64(&format!("value {j} of class {cid}"))
                .map_err(|e| Error::data(format!("prototype record for class {cid}: {e}")))?;
            proto.push(v);
        }
        class_ids.push(cid as usize);
        prototypes.push(proto);
    }
    r.expect_eof("codebook")?;
    let bank = ConceptBank {
        prototypes,
        mu,
        last_update_step: step,
        class_ids,
        num_concepts: k,
        concept_dim: d,
        config_hash,
    };
    if !bank.is_finite() {
        return Err(Error::data("codebook contains non-finite values"));
    }
    Ok(bank)
}
