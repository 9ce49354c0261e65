//! Run configuration: a plain hierarchical TOML file, validated strictly
//! (unknown keys rejected), with `--set key.path=value` overrides applied on
//! the raw value tree before deserialization. The fully resolved config is
//! written back into the run directory so every run is auditable and
//! reproducible from its artifacts alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rce_core::augment::{PolicyKind, TransformPolicy, TransformStrengths};
use rce_core::data::{self, DomainDataset, Shift, Split, SynthSpec};
use rce_core::error::{Error, Result};
use rce_core::eval::ExtractionRule;
use rce_core::hash;
use rce_core::losses::Similarity;
use rce_core::model::{Backbone, ModelSpec};
use rce_core::trainer::{Ablation, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed: model init, batch sampling, augmentation, splits.
    pub seed: u64,
    /// Recorded in the snapshot; execution is single-threaded and
    /// deterministic either way.
    pub deterministic: bool,
    /// Default parent for run directories (overridden by --out or RCE_OUT_ROOT).
    pub output_root: Option<String>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub augmentation: AugmentationSection,
    pub data: DataSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: false,
            output_root: None,
            model: ModelSection::default(),
            train: TrainSection::default(),
            augmentation: AugmentationSection::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `[channels, height, width]`; inferred from the data when omitted.
    pub input_shape: Option<[usize; 3]>,
    /// Inferred from the data when omitted.
    pub num_classes: Option<usize>,
    /// Defaults to the number of classes.
    pub num_concepts: Option<usize>,
    pub concept_dim: usize,
    pub backbone: Backbone,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            input_shape: None,
            num_classes: None,
            num_concepts: None,
            concept_dim: 1,
            backbone: Backbone::SmallConv,
        }
    }
}

/// Scalar training hyperparameters; the augmentation policy lives in its own
/// section and the seed is global.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub omega1: f64,
    pub omega2: f64,
    pub lambda: f64,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub mu: f64,
    pub epsilon: f64,
    pub lr0: f64,
    pub momentum: f64,
    pub max_steps: u64,
    pub batch_size: usize,
    pub eval_interval: u64,
    pub early_stop_patience: u32,
    pub ablation: Ablation,
    pub source_prototypes_per_class: usize,
    pub target_prototypes_per_class: usize,
    pub similarity: Similarity,
    pub dropout: f64,
    pub bank_gradients: bool,
    pub init_from: Option<PathBuf>,
    /// Extra full-state snapshots every N steps (0 disables).
    pub checkpoint_interval: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            omega1: d.omega1,
            omega2: d.omega2,
            lambda: d.lambda,
            tau: d.tau,
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            beta: d.beta,
            mu: d.mu,
            epsilon: d.epsilon,
            lr0: d.lr0,
            momentum: d.momentum,
            max_steps: d.max_steps,
            batch_size: d.batch_size,
            eval_interval: d.eval_interval,
            early_stop_patience: d.early_stop_patience,
            ablation: d.ablation,
            source_prototypes_per_class: d.source_prototypes_per_class,
            target_prototypes_per_class: d.target_prototypes_per_class,
            similarity: d.similarity,
            dropout: d.dropout,
            bank_gradients: d.bank_gradients,
            init_from: d.init_from,
            checkpoint_interval: 0,
        }
    }
}

/// Augmentation policy declaration. Strength fields default to the chosen
/// policy's canonical values; any field can be overridden individually.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSection {
    pub kind: PolicyKind,
    pub views_per_set: usize,
    pub crop_scale_min: Option<f64>,
    pub crop_scale_max: Option<f64>,
    pub rotation_degrees: Option<f64>,
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
    pub saturation: Option<f64>,
    pub hue: Option<f64>,
    pub blur_sigma_min: Option<f64>,
    pub blur_sigma_max: Option<f64>,
    pub flip_prob: Option<f64>,
    pub jitter_prob: Option<f64>,
    pub grayscale_prob: Option<f64>,
    pub blur_prob: Option<f64>,
}

impl Default for AugmentationSection {
    fn default() -> Self {
        AugmentationSection {
            kind: PolicyKind::SimclrSuite,
            views_per_set: 2,
            crop_scale_min: None,
            crop_scale_max: None,
            rotation_degrees: None,
            brightness: None,
            contrast: None,
            saturation: None,
            hue: None,
            blur_sigma_min: None,
            blur_sigma_max: None,
            flip_prob: None,
            jitter_prob: None,
            grayscale_prob: None,
            blur_prob: None,
        }
    }
}

impl AugmentationSection {
    pub fn to_policy(&self) -> TransformPolicy {
        let base = match self.kind {
            PolicyKind::CropRotate => TransformStrengths::crop_rotate_defaults(),
            PolicyKind::SimclrSuite => TransformStrengths::simclr_defaults(),
        };
        let strengths = TransformStrengths {
            crop_scale_min: self.crop_scale_min.unwrap_or(base.crop_scale_min),
            crop_scale_max: self.crop_scale_max.unwrap_or(base.crop_scale_max),
            rotation_degrees: self.rotation_degrees.unwrap_or(base.rotation_degrees),
            brightness: self.brightness.unwrap_or(base.brightness),
            contrast: self.contrast.unwrap_or(base.contrast),
            saturation: self.saturation.unwrap_or(base.saturation),
            hue: self.hue.unwrap_or(base.hue),
            blur_sigma_min: self.blur_sigma_min.unwrap_or(base.blur_sigma_min),
            blur_sigma_max: self.blur_sigma_max.unwrap_or(base.blur_sigma_max),
            flip_prob: self.flip_prob.unwrap_or(base.flip_prob),
            jitter_prob: self.jitter_prob.unwrap_or(base.jitter_prob),
            grayscale_prob: self.grayscale_prob.unwrap_or(base.grayscale_prob),
            blur_prob: self.blur_prob.unwrap_or(base.blur_prob),
        };
        TransformPolicy {
            kind: self.kind,
            strengths,
            views_per_set: self.views_per_set,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synth,
    Idx,
    ImageFolder,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    /// Labeled target samples kept for training (the few-shot budget).
    pub shots_per_class: usize,
    /// Fraction of the remaining target pool used for validation; the rest
    /// is the target test set.
    pub val_fraction: f64,
    pub synth: SynthSection,
    pub idx: IdxSection,
    pub image_folder: ImageFolderSection,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: DataKind::Synth,
            shots_per_class: 3,
            val_fraction: 0.5,
            synth: SynthSection::default(),
            idx: IdxSection::default(),
            image_folder: ImageFolderSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub target_samples_per_class: Option<usize>,
    pub shift: Shift,
    /// Separate data seed; defaults to the global seed.
    pub seed: Option<u64>,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n_classes: 4,
            samples_per_class: 200,
            target_samples_per_class: Some(60),
            shift: Shift::Invert,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdxSection {
    pub source_images: Option<PathBuf>,
    pub source_labels: Option<PathBuf>,
    pub target_images: Option<PathBuf>,
    pub target_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageFolderSection {
    pub source_root: Option<PathBuf>,
    pub target_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalDataset {
    Source,
    TargetTrain,
    TargetVal,
    TargetTest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub rule: ExtractionRule,
    pub fidelity_pairs_per_class: usize,
    /// Checkpoint consumed by eval/fidelity/explain.
    pub checkpoint: Option<PathBuf>,
    pub dataset: EvalDataset,
    pub query_index: usize,
    pub top_k: usize,
    pub write_grid: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            rule: ExtractionRule::default(),
            fidelity_pairs_per_class: 100,
            checkpoint: None,
            dataset: EvalDataset::TargetTest,
            query_index: 0,
            top_k: 5,
            write_grid: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub modes: Vec<Ablation>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            modes: vec![Ablation::Rce, Ablation::RcePcg, Ablation::RcePcgCcl],
        }
    }
}

/// Parses a config file, applies `--set key.path=value` overrides onto the
/// raw TOML tree, then deserializes strictly.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config '{}': {e}", path.display())))?;
    let mut value: toml::Value = toml::from_str(&text)
        .map_err(|e| Error::config(format!("config '{}': {e}", path.display())))?;
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    let cfg: RunConfig = value
        .try_into()
        .map_err(|e| Error::config(format!("config '{}': {e}", path.display())))?;
    validate(&cfg)?;
    Ok(cfg)
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{spec}' must be key.path=value")))?;
    let parsed: toml::Value = match toml::from_str::<toml::Value>(&format!("v = {raw}")) {
        Ok(toml::Value::Table(t)) => t.get("v").cloned().unwrap(),
        _ => toml::Value::String(raw.to_string()),
    };
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cursor.as_table_mut().ok_or_else(|| {
            Error::config(format!("override '{key}': '{part}' is not a table"))
        })?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    unreachable!("override paths are non-empty")
}

fn validate(cfg: &RunConfig) -> Result<()> {
    if !(0.0..=1.0).contains(&cfg.data.val_fraction) {
        return Err(Error::config("data.val_fraction must lie in [0, 1]"));
    }
    if cfg.data.shots_per_class == 0 {
        return Err(Error::config("data.shots_per_class must be >= 1"));
    }
    cfg.to_train_config().validate()?;
    if cfg.ablate.modes.is_empty() {
        return Err(Error::config("ablate.modes must not be empty"));
    }
    Ok(())
}

impl RunConfig {
    pub fn to_train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            omega1: t.omega1,
            omega2: t.omega2,
            lambda: t.lambda,
            tau: t.tau,
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            beta: t.beta,
            mu: t.mu,
            epsilon: t.epsilon,
            lr0: t.lr0,
            momentum: t.momentum,
            max_steps: t.max_steps,
            batch_size: t.batch_size,
            eval_interval: t.eval_interval,
            early_stop_patience: t.early_stop_patience,
            ablation: t.ablation,
            seed: self.seed,
            augmentation: self.augmentation.to_policy(),
            source_prototypes_per_class: t.source_prototypes_per_class,
            target_prototypes_per_class: t.target_prototypes_per_class,
            similarity: t.similarity,
            dropout: t.dropout,
            bank_gradients: t.bank_gradients,
            init_from: t.init_from.clone(),
        }
    }

    /// Model spec with data-derived defaults filled in.
    pub fn to_model_spec(&self, data_shape: (usize, usize, usize), data_classes: usize) -> Result<ModelSpec> {
        let input_shape = match self.model.input_shape {
            Some([c, h, w]) => (c, h, w),
            None => data_shape,
        };
        let num_classes = self.model.num_classes.unwrap_or(data_classes);
        let spec = ModelSpec {
            input_shape,
            num_classes,
            num_concepts: self.model.num_concepts.unwrap_or(num_classes),
            concept_dim: self.model.concept_dim,
            backbone: self.model.backbone,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Canonical resolved TOML (every default filled).
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn fingerprint(&self) -> u64 {
        hash::fnv1a64(self.resolved_toml().as_bytes())
    }
}

/// The four splits every command operates on.
pub struct LoadedTask {
    pub source: DomainDataset,
    pub target_train: DomainDataset,
    pub target_val: DomainDataset,
    pub target_test: DomainDataset,
}

impl LoadedTask {
    pub fn select(&self, which: EvalDataset) -> &DomainDataset {
        match which {
            EvalDataset::Source => &self.source,
            EvalDataset::TargetTrain => &self.target_train,
            EvalDataset::TargetVal => &self.target_val,
            EvalDataset::TargetTest => &self.target_test,
        }
    }
}

/// Loads source/target data per the config and applies the few-shot and
/// val/test splits with seeds derived from the global seed.
pub fn load_task(cfg: &RunConfig) -> Result<LoadedTask> {
    let (source, target_pool) = match cfg.data.kind {
        DataKind::Synth => {
            let s = &cfg.data.synth;
            let spec = SynthSpec {
                n_classes: s.n_classes,
                samples_per_class: s.samples_per_class,
                target_samples_per_class: s.target_samples_per_class,
                shift: s.shift,
                seed: s.seed.unwrap_or(cfg.seed),
            };
            data::synth_two_domain(&spec)?
        }
        DataKind::Idx => {
            let i = &cfg.data.idx;
            let need = |p: &Option<PathBuf>, what: &str| {
                p.clone()
                    .ok_or_else(|| Error::config(format!("data.idx.{what} is required for kind = idx")))
            };
            let source = data::load_idx(
                &need(&i.source_images, "source_images")?,
                &need(&i.source_labels, "source_labels")?,
            )?;
            let target = data::load_idx(
                &need(&i.target_images, "target_images")?,
                &need(&i.target_labels, "target_labels")?,
            )?;
            (source, target)
        }
        DataKind::ImageFolder => {
            let f = &cfg.data.image_folder;
            let shape = cfg.model.input_shape.map(|[c, h, w]| (c, h, w)).ok_or_else(|| {
                Error::config("model.input_shape is required for image_folder data")
            })?;
            let source_root = f
                .source_root
                .clone()
                .ok_or_else(|| Error::config("data.image_folder.source_root is required"))?;
            let target_root = f
                .target_root
                .clone()
                .ok_or_else(|| Error::config("data.image_folder.target_root is required"))?;
            (
                data::load_image_folder(&source_root, shape)?,
                data::load_image_folder(&target_root, shape)?,
            )
        }
    };
    let (target_train, remainder) = data::few_shot_split(
        &target_pool,
        cfg.data.shots_per_class,
        hash::mix(&[cfg.seed, 0x5807]),
    )?;
    let (target_val, target_test) = data::split_fraction(
        &remainder,
        cfg.data.val_fraction,
        hash::mix(&[cfg.seed, 0x7E57]),
        Split::Val,
        Split::Test,
    )?;
    Ok(LoadedTask {
        source,
        target_train,
        target_val,
        target_test,
    })
}
