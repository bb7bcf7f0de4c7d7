//! JSON experiment configuration, validated before any compute.
//!
//! A single top-level `seed` drives every random stream (data synthesis,
//! initialization, head replacement, noise, shuffling, certification); the
//! `SMOOTHCERT_SEED` environment variable replaces it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::certify::{SmoothingParams, DEFAULT_ALPHA, DEFAULT_BATCH, DEFAULT_N, DEFAULT_N0};
use crate::data::{load_idx, make_transfer_pair, synth_shapes, Dataset, NoiseSpec, Split, MAX_SYNTH_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, ModelSpec};
use crate::norms::NormKind;
use crate::optim::SgdConfig;
use crate::rng;
use crate::trainer::{FinetuneMode, TrainPlan};

pub const SEED_ENV: &str = "SMOOTHCERT_SEED";
/// Certification noise levels used when a config does not list its own.
pub const DEFAULT_CERTIFY_SIGMAS: [f64; 3] = [0.25, 0.5, 1.0];
/// Mixed pretraining set: the certification levels plus the clean case.
pub const DEFAULT_MIXED_SIGMAS: [f64; 4] = [0.0, 0.25, 0.5, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required, unless supplied through `SMOOTHCERT_SEED`.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Artifact directory; `--out` takes precedence.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub transfer: Option<TransferConfig>,
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub finetune: Option<FinetuneConfig>,
    #[serde(default)]
    pub certify: Option<CertifyConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synth {
        num_classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_size")]
        size: usize,
    },
    /// Label files are found by replacing `images` with `labels` and
    /// `idx3` with `idx1` in the image file name.
    Idx { train_images: PathBuf, test_images: PathBuf },
}

fn default_size() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub upstream: Vec<usize>,
    pub downstream: Vec<usize>,
    /// Keep only the first this-many training samples of each downstream class.
    #[serde(default)]
    pub downstream_train_per_class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of each conv → norm → ReLU stage.
    pub stages: Vec<usize>,
    pub norm: NormKind,
    /// Group count for group norm (default `min(32, channels)`).
    #[serde(default)]
    pub groups: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigmas: Vec<f64>,
    /// Uniform when omitted.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    /// Draw one σ per batch instead of per sample.
    #[serde(default)]
    pub per_batch: bool,
}

impl NoiseConfig {
    pub fn clean() -> Self {
        Self {
            sigmas: vec![0.0],
            weights: None,
            per_batch: false,
        }
    }

    pub fn mixed() -> Self {
        Self {
            sigmas: DEFAULT_MIXED_SIGMAS.to_vec(),
            weights: None,
            per_batch: false,
        }
    }
}

fn default_eval_every() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub noise: NoiseConfig,
    pub sgd: SgdConfig,
    /// Train once per learning rate and keep the best by clean test accuracy.
    #[serde(default)]
    pub lr_sweep: Option<Vec<f64>>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "default_mode")]
    pub mode: FinetuneMode,
    pub sgd: SgdConfig,
    /// Noise during fine-tuning; only honored with `allow_noisy`.
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    #[serde(default)]
    pub allow_noisy: bool,
    #[serde(default)]
    pub freeze_norm_stats: bool,
    #[serde(default)]
    pub lr_sweep: Option<Vec<f64>>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Starting checkpoint; defaults to `pretrain.smck` in the output directory.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Replace the head even when the class count is unchanged.
    #[serde(default = "default_true")]
    pub replace_head: bool,
    /// Start from a fresh initialization instead of a checkpoint.
    #[serde(default)]
    pub from_scratch: bool,
}

fn default_mode() -> FinetuneMode {
    FinetuneMode::FullNetwork
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    #[serde(default = "default_sigmas")]
    pub sigmas: Vec<f64>,
    #[serde(default = "default_n0")]
    pub n0: u64,
    #[serde(default = "default_n")]
    pub n: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Certify only this many test inputs, evenly spaced over the split.
    #[serde(default)]
    pub max_inputs: Option<usize>,
    /// Defaults to `finetune.smck` (or `pretrain.smck` without a finetune
    /// section) in the output directory.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_sigmas() -> Vec<f64> {
    DEFAULT_CERTIFY_SIGMAS.to_vec()
}
fn default_n0() -> u64 {
    DEFAULT_N0
}
fn default_n() -> u64 {
    DEFAULT_N
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_batch() -> usize {
    DEFAULT_BATCH
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            sigmas: default_sigmas(),
            n0: DEFAULT_N0,
            n: DEFAULT_N,
            alpha: DEFAULT_ALPHA,
            batch: DEFAULT_BATCH,
            max_inputs: None,
            checkpoint: None,
        }
    }
}

/// Purposes of seeds derived from the experiment seed.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum SeedRole {
    TrainData = 1,
    TestData = 2,
    Init = 3,
    Pretrain = 4,
    Head = 5,
    Finetune = 6,
    Certify = 7,
}

/// Train and test splits for both stages. Without a transfer section the
/// downstream task is the upstream task.
pub struct Splits {
    pub upstream_train: Dataset,
    pub upstream_test: Dataset,
    pub downstream_train: Dataset,
    pub downstream_test: Dataset,
}

fn check(cond: bool, field: &str, message: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::invalid(field, message))
    }
}

fn check_lrs(lrs: &Option<Vec<f64>>, field: &str) -> Result<()> {
    if let Some(lrs) = lrs {
        check(!lrs.is_empty(), field, "must list at least one learning rate")?;
        for (i, lr) in lrs.iter().enumerate() {
            check(*lr > 0.0 && lr.is_finite(), &format!("{field}[{i}]"), format!("must be positive, got {lr}"))?;
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parse and validate JSON text. `seed_override` (normally from
    /// `SMOOTHCERT_SEED`) replaces the configured seed.
    pub fn from_json(text: &str, seed_override: Option<u64>) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.to_string();
            let base = if path == "." { String::new() } else { path };
            match message.strip_prefix("missing field `").and_then(|m| m.split_once('`')) {
                Some((field, _)) => Error::invalid(
                    if base.is_empty() { field.to_string() } else { format!("{base}.{field}") },
                    "missing required field",
                ),
                None => Error::invalid(if base.is_empty() { "config".to_string() } else { base }, message),
            }
        })?;
        if seed_override.is_some() {
            cfg.seed = seed_override;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, seed_override)
    }

    /// Read `SMOOTHCERT_SEED` if set.
    pub fn seed_from_env() -> Result<Option<u64>> {
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| Error::invalid(SEED_ENV, format!("not an unsigned integer: {v:?}"))),
            Err(std::env::VarError::NotPresent) => Ok(None),
            Err(e) => Err(Error::invalid(SEED_ENV, e.to_string())),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        check(self.seed.is_some(), "seed", format!("missing required field (or set {SEED_ENV})"))?;
        let classes = match &self.dataset {
            DatasetConfig::Synth {
                num_classes,
                train_per_class,
                test_per_class,
                size,
            } => {
                check(
                    (2..=MAX_SYNTH_CLASSES).contains(num_classes),
                    "dataset.num_classes",
                    format!("must be in 2..={MAX_SYNTH_CLASSES}"),
                )?;
                check(*train_per_class > 0, "dataset.train_per_class", "must be positive")?;
                check(*test_per_class > 0, "dataset.test_per_class", "must be positive")?;
                check(*size >= 8, "dataset.size", "must be at least 8")?;
                Some(*num_classes)
            }
            DatasetConfig::Idx { .. } => None,
        };
        if let Some(t) = &self.transfer {
            check(!t.upstream.is_empty(), "transfer.upstream", "must not be empty")?;
            check(!t.downstream.is_empty(), "transfer.downstream", "must not be empty")?;
            check(t.downstream.len() >= 2, "transfer.downstream", "needs at least two classes")?;
            if let Some(c) = t.downstream.iter().find(|c| t.upstream.contains(c)) {
                return Err(Error::invalid("transfer.downstream", format!("class {c} is also upstream")));
            }
            if let Some(k) = classes {
                for (name, set) in [("transfer.upstream", &t.upstream), ("transfer.downstream", &t.downstream)] {
                    if let Some(c) = set.iter().find(|&&c| c >= k) {
                        return Err(Error::invalid(name, format!("class {c} outside 0..{k}")));
                    }
                }
            }
            check(
                t.downstream_train_per_class != Some(0),
                "transfer.downstream_train_per_class",
                "must be positive",
            )?;
        }
        check(!self.model.stages.is_empty(), "model.stages", "needs at least one stage")?;
        check(self.model.stages.iter().all(|&c| c > 0), "model.stages", "channel counts must be positive")?;
        if let Some(g) = self.model.groups {
            check(g > 0, "model.groups", "must be positive")?;
            if self.model.norm == NormKind::Group {
                if let Some(c) = self.model.stages.iter().find(|&&c| c % g != 0) {
                    return Err(Error::invalid("model.groups", format!("{g} does not divide {c} channels")));
                }
            }
        }
        if let Some(p) = &self.pretrain {
            p.sgd.validate().map_err(|e| e.under("pretrain.sgd"))?;
            NoiseSpec::new(p.noise.sigmas.clone(), p.noise.weights.clone(), 0).map_err(|e| e.under("pretrain.noise"))?;
            check_lrs(&p.lr_sweep, "pretrain.lr_sweep")?;
            check(p.eval_every > 0, "pretrain.eval_every", "must be positive")?;
        }
        if let Some(f) = &self.finetune {
            f.sgd.validate().map_err(|e| e.under("finetune.sgd"))?;
            if let Some(n) = &f.noise {
                NoiseSpec::new(n.sigmas.clone(), n.weights.clone(), 0).map_err(|e| e.under("finetune.noise"))?;
                let clean = n.sigmas.iter().all(|&s| s == 0.0);
                check(
                    clean || f.allow_noisy,
                    "finetune.noise",
                    "fine-tuning uses clean images; set finetune.allow_noisy for a noisy ablation",
                )?;
            }
            check(
                !(f.from_scratch && f.checkpoint.is_some()),
                "finetune.from_scratch",
                "conflicts with finetune.checkpoint",
            )?;
            check_lrs(&f.lr_sweep, "finetune.lr_sweep")?;
            check(f.eval_every > 0, "finetune.eval_every", "must be positive")?;
        }
        if let Some(c) = &self.certify {
            check(!c.sigmas.is_empty(), "certify.sigmas", "must list at least one sigma")?;
            for (i, &s) in c.sigmas.iter().enumerate() {
                self.smoothing(s, 0)
                    .validate()
                    .map_err(|e| e.under("certify"))
                    .map_err(|e| match e {
                        Error::Invalid { field, message } if field == "certify.sigma" => {
                            Error::invalid(format!("certify.sigmas[{i}]"), message)
                        }
                        other => other,
                    })?;
            }
            check(c.max_inputs != Some(0), "certify.max_inputs", "must be positive")?;
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    pub fn derived_seed(&self, role: SeedRole) -> u64 {
        rng::derive_seed(self.seed(), &[rng::NS_CONFIG, role as u64])
    }

    /// Load the dataset and cut it into upstream and downstream tasks.
    pub fn splits(&self) -> Result<Splits> {
        let (train, test) = match &self.dataset {
            DatasetConfig::Synth {
                num_classes,
                train_per_class,
                test_per_class,
                size,
            } => (
                synth_shapes(*num_classes, *train_per_class, *size, self.derived_seed(SeedRole::TrainData), Split::Train)?,
                synth_shapes(*num_classes, *test_per_class, *size, self.derived_seed(SeedRole::TestData), Split::Test)?,
            ),
            DatasetConfig::Idx { train_images, test_images } => {
                (load_idx(train_images, Split::Train)?, load_idx(test_images, Split::Test)?)
            }
        };
        match &self.transfer {
            None => Ok(Splits {
                downstream_train: train.clone(),
                downstream_test: test.clone(),
                upstream_train: train,
                upstream_test: test,
            }),
            Some(t) => {
                let (upstream_train, mut downstream_train) = make_transfer_pair(&train, &t.upstream, &t.downstream)?;
                let (upstream_test, downstream_test) = make_transfer_pair(&test, &t.upstream, &t.downstream)?;
                if let Some(m) = t.downstream_train_per_class {
                    downstream_train = downstream_train.take_per_class(m)?;
                }
                Ok(Splits {
                    upstream_train,
                    upstream_test,
                    downstream_train,
                    downstream_test,
                })
            }
        }
    }

    /// Model spec for `classes` outputs on `input` = [C, H, W].
    pub fn model_spec(&self, input: [usize; 3], classes: usize) -> Result<ModelSpec> {
        let spec = ModelSpec::conv_net(input, &self.model.stages, self.model.norm, self.model.groups, classes);
        spec.validate()?;
        debug_assert!(matches!(spec.layers.last(), Some(LayerSpec::Dense { .. })));
        Ok(spec)
    }

    pub fn pretrain_plan(&self) -> Result<TrainPlan> {
        let p = self
            .pretrain
            .as_ref()
            .ok_or_else(|| Error::invalid("pretrain", "section required for this command"))?;
        let seed = self.derived_seed(SeedRole::Pretrain);
        let mut noise = NoiseSpec::new(p.noise.sigmas.clone(), p.noise.weights.clone(), seed)?;
        noise.per_batch = p.noise.per_batch;
        let mut plan = TrainPlan::pretrain(noise, p.sgd.clone(), seed);
        plan.eval_every = p.eval_every;
        Ok(plan)
    }

    pub fn finetune_plan(&self) -> Result<TrainPlan> {
        let f = self
            .finetune
            .as_ref()
            .ok_or_else(|| Error::invalid("finetune", "section required for this command"))?;
        let seed = self.derived_seed(SeedRole::Finetune);
        let mut plan = TrainPlan::finetune(f.mode, f.sgd.clone(), seed);
        if let Some(n) = &f.noise {
            plan.noise = NoiseSpec::new(n.sigmas.clone(), n.weights.clone(), seed)?;
            plan.noise.per_batch = n.per_batch;
        }
        plan.allow_noisy_finetune = f.allow_noisy;
        plan.freeze_norm_stats = f.freeze_norm_stats;
        plan.eval_every = f.eval_every;
        Ok(plan)
    }

    pub fn certify_config(&self) -> CertifyConfig {
        self.certify.clone().unwrap_or_default()
    }

    /// Smoothing parameters for one certification σ.
    pub fn smoothing(&self, sigma: f64, seed: u64) -> SmoothingParams {
        let c = self.certify_config();
        SmoothingParams {
            sigma,
            n0: c.n0,
            n: c.n,
            alpha: c.alpha,
            batch: c.batch,
            seed,
        }
    }

    /// `--out` wins over the configured directory, which defaults to `runs`.
    pub fn output_dir(&self, cli: Option<&Path>) -> PathBuf {
        cli.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = r#"{
        "seed": 3,
        "dataset": {"source": "synth", "num_classes": 5, "train_per_class": 4, "test_per_class": 2},
        "transfer": {"upstream": [0, 1, 2], "downstream": [3, 4]},
        "model": {"stages": [4], "norm": "group", "groups": 2},
        "pretrain": {"noise": {"sigmas": [0, 0.25]}, "sgd": {"base_lr": 0.01, "epochs": 2, "batch_size": 4}},
        "finetune": {"sgd": {"base_lr": 0.01, "epochs": 1, "batch_size": 4}},
        "certify": {"sigmas": [0.25], "n": 50}
    }"#;

    fn field_of(e: Error) -> String {
        match e {
            Error::Invalid { field, .. } => field,
            other => panic!("expected a field error, got {other}"),
        }
    }

    #[test]
    fn smoke_config_parses() {
        let cfg = ExperimentConfig::from_json(SMOKE, None).unwrap();
        assert_eq!(cfg.seed(), 3);
        assert_eq!(cfg.certify_config().n0, DEFAULT_N0);
        let s = cfg.splits().unwrap();
        assert_eq!((s.upstream_train.num_classes, s.downstream_train.num_classes), (3, 2));
        assert_eq!(s.downstream_test.len(), 4);
        let back = ExperimentConfig::from_json(&cfg.to_json(), None).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_nested_field_is_named() {
        let text = SMOKE.replace(r#""base_lr": 0.01, "epochs": 2"#, r#""epochs": 2"#);
        let err = ExperimentConfig::from_json(&text, None).unwrap_err();
        assert_eq!(field_of(err), "pretrain.sgd.base_lr");
    }

    #[test]
    fn out_of_range_values_are_named() {
        let text = SMOKE.replace(r#""base_lr": 0.01, "epochs": 1"#, r#""base_lr": -1, "epochs": 1"#);
        assert_eq!(field_of(ExperimentConfig::from_json(&text, None).unwrap_err()), "finetune.sgd.base_lr");
        let text = SMOKE.replace(r#""sigmas": [0.25], "n": 50"#, r#""sigmas": [0.25, 0], "n": 50"#);
        assert_eq!(field_of(ExperimentConfig::from_json(&text, None).unwrap_err()), "certify.sigmas[1]");
        let text = SMOKE.replace(r#""downstream": [3, 4]"#, r#""downstream": [2, 4]"#);
        assert_eq!(field_of(ExperimentConfig::from_json(&text, None).unwrap_err()), "transfer.downstream");
        let text = SMOKE.replace(r#""norm": "group""#, r#""norm": "weight""#);
        assert_eq!(field_of(ExperimentConfig::from_json(&text, None).unwrap_err()), "model.norm");
        let text = SMOKE.replace(r#""groups": 2"#, r#""groups": 3"#);
        assert_eq!(field_of(ExperimentConfig::from_json(&text, None).unwrap_err()), "model.groups");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = SMOKE.replace(r#""seed": 3,"#, r#""seed": 3, "sedd": 4,"#);
        assert!(ExperimentConfig::from_json(&text, None).is_err());
        let text = SMOKE.replace(r#""batch_size": 4}}"#, r#""batch_size": 4, "nesterov": true}}"#);
        assert_eq!(field_of(ExperimentConfig::from_json(&text, None).unwrap_err()), "pretrain.sgd.nesterov");
    }

    #[test]
    fn seed_is_required_unless_overridden() {
        let text = SMOKE.replace(r#""seed": 3,"#, "");
        assert_eq!(field_of(ExperimentConfig::from_json(&text, None).unwrap_err()), "seed");
        let cfg = ExperimentConfig::from_json(&text, Some(9)).unwrap();
        assert_eq!(cfg.seed(), 9);
        assert_eq!(ExperimentConfig::from_json(SMOKE, Some(9)).unwrap().seed(), 9);
    }

    #[test]
    fn noisy_finetune_needs_opt_in() {
        let text = SMOKE.replace(
            r#""finetune": {"sgd""#,
            r#""finetune": {"noise": {"sigmas": [0.25]}, "sgd""#,
        );
        assert_eq!(field_of(ExperimentConfig::from_json(&text, None).unwrap_err()), "finetune.noise");
        let text = text.replace(r#""noise": {"sigmas": [0.25]},"#, r#""noise": {"sigmas": [0.25]}, "allow_noisy": true,"#);
        let plan = ExperimentConfig::from_json(&text, None).unwrap().finetune_plan().unwrap();
        assert!(plan.allow_noisy_finetune);
    }

    #[test]
    fn derived_seeds_differ_by_role() {
        let cfg = ExperimentConfig::from_json(SMOKE, None).unwrap();
        assert_ne!(cfg.derived_seed(SeedRole::Init), cfg.derived_seed(SeedRole::Head));
        let other = ExperimentConfig::from_json(SMOKE, Some(4)).unwrap();
        assert_ne!(cfg.derived_seed(SeedRole::Init), other.derived_seed(SeedRole::Init));
    }
}
