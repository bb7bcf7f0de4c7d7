//! Two-stage pipeline: mixed-noise pretraining on the upstream task, head
//! replacement, and fine-tuning on the downstream task (clean images only by
//! default) in full-network or fixed-feature mode.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{sample_noisy_batch, Dataset, NoiseSpec};
use crate::error::{Error, Result};
use crate::nn::{argmax, Mode, Model};
use crate::optim::{Sgd, SgdConfig};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    FullNetwork,
    FixedFeature,
}

#[derive(Clone, Debug)]
pub struct TrainPlan {
    pub stage: Stage,
    pub noise: NoiseSpec,
    pub finetune_mode: FinetuneMode,
    pub sgd: SgdConfig,
    /// Evaluate clean test accuracy every this many epochs (and always on the last).
    pub eval_every: usize,
    pub seed: u64,
    /// Keep a noisy noise set during fine-tuning instead of forcing `{0}`.
    pub allow_noisy_finetune: bool,
    /// Stop batch-norm running statistics from updating.
    pub freeze_norm_stats: bool,
}

impl TrainPlan {
    pub fn pretrain(noise: NoiseSpec, sgd: SgdConfig, seed: u64) -> Self {
        Self {
            stage: Stage::Pretrain,
            noise,
            finetune_mode: FinetuneMode::FullNetwork,
            sgd,
            eval_every: 1,
            seed,
            allow_noisy_finetune: false,
            freeze_norm_stats: false,
        }
    }

    pub fn finetune(mode: FinetuneMode, sgd: SgdConfig, seed: u64) -> Self {
        Self {
            stage: Stage::Finetune,
            noise: NoiseSpec::clean(seed),
            finetune_mode: mode,
            sgd,
            eval_every: 1,
            seed,
            allow_noisy_finetune: false,
            freeze_norm_stats: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy of the training-mode passes over the (noisy) batches.
    pub train_acc: f64,
    /// Clean test accuracy in eval mode, when evaluated this epoch.
    pub clean_acc: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_clock: Duration,
    pub base_lr: f64,
    /// How many training samples received each noise level.
    pub sigma_counts: BTreeMap<u64, u64>,
}

impl TrainReport {
    pub fn final_clean_acc(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.clean_acc)
    }

    /// Largest noise level any training sample received.
    pub fn max_sigma_seen(&self) -> f64 {
        self.sigma_counts.keys().map(|&b| f64::from_bits(b)).fold(0.0, f64::max)
    }

    /// `epoch,loss,clean_acc,lr` lines; clean_acc is empty when not evaluated.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,clean_acc,lr\n");
        for e in &self.epochs {
            let acc = e.clean_acc.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, acc, e.lr));
        }
        out
    }
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub report: TrainReport,
}

/// Failed run: the error, the last model state with finite parameters, and
/// the partial report.
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<Model<f32>>,
    pub report: TrainReport,
}

impl std::fmt::Debug for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TrainFailure({})", self.error)
    }
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self {
            error,
            last_good: None,
            report: TrainReport::default(),
        }
    }
}

/// Clean accuracy in eval mode.
pub fn evaluate(model: &Model<f32>, data: &Dataset) -> Result<f64> {
    Ok(predict_clean(model, data)?
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count() as f64
        / data.len() as f64)
}

/// Eval-mode argmax predictions for every sample.
pub fn predict_clean(model: &Model<f32>, data: &Dataset) -> Result<Vec<usize>> {
    const CHUNK: usize = 256;
    let mut preds = Vec::with_capacity(data.len());
    let mut start = 0;
    while start < data.len() {
        let count = CHUNK.min(data.len() - start);
        let logits = model.forward(&data.images.slice_outer(start, count)?, Mode::Eval)?;
        let k = logits.shape()[1];
        preds.extend(logits.data().chunks(k).map(argmax));
        start += count;
    }
    Ok(preds)
}

fn run(mut model: Model<f32>, train: &Dataset, test: Option<&Dataset>, plan: &TrainPlan) -> Result<TrainOutcome, TrainFailure> {
    let started = Instant::now();
    if train.num_classes != model.num_classes() {
        return Err(Error::Domain(format!(
            "model head has {} outputs, dataset has {} classes",
            model.num_classes(),
            train.num_classes
        ))
        .into());
    }
    let mut opt = Sgd::new(plan.sgd.clone())?;
    let fixed = plan.stage == Stage::Finetune && plan.finetune_mode == FinetuneMode::FixedFeature;
    let head = model.head_index();
    let stop_at = if fixed { head } else { 0 };
    let trainable: Vec<bool> = model.param_layers().iter().map(|&l| !fixed || l == head).collect();
    model.freeze_norm_stats(plan.freeze_norm_stats);

    let cfg = &plan.sgd;
    let n = train.len();
    let batches = n.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches) as f64;
    let mut report = TrainReport {
        base_lr: cfg.base_lr,
        ..TrainReport::default()
    };
    let mut last_good = model.clone();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(plan.seed, &[rng::NS_SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut lr = 0.0;
        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let batch = sample_noisy_batch(train, idx, &plan.noise, epoch as u64)?;
            for &s in &batch.sigmas {
                *report.sigma_counts.entry(s.to_bits()).or_default() += 1;
            }
            model.zero_grad();
            let out = model.loss_backward(&batch.images, &batch.labels, Mode::Train, stop_at)?;
            if !out.loss.is_finite() {
                return Err(TrainFailure {
                    error: Error::Diverged { epoch },
                    last_good: Some(last_good),
                    report,
                });
            }
            loss_sum += out.loss * idx.len() as f64;
            correct += out.correct;
            let step = (epoch * batches + b) as f64;
            lr = opt.step(&mut model.params_mut(), &trainable, step / total_steps);
        }
        let loss = loss_sum / n as f64;
        let finite = model.params().iter().all(|p| p.tensor.all_finite());
        if !loss.is_finite() || !finite {
            return Err(TrainFailure {
                error: Error::Diverged { epoch },
                last_good: Some(last_good),
                report,
            });
        }
        let evaluate_now = (epoch + 1) % plan.eval_every.max(1) == 0 || epoch + 1 == cfg.epochs;
        let clean_acc = match (test, evaluate_now) {
            (Some(t), true) => Some(evaluate(&model, t)?),
            _ => None,
        };
        report.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss,
            train_acc: correct as f64 / n as f64,
            clean_acc,
            lr,
        });
        last_good = model.clone();
    }
    model.freeze_norm_stats(false);
    report.wall_clock = started.elapsed();
    Ok(TrainOutcome { model, report })
}

/// Train every parameter on `upstream` with per-sample noise drawn from `plan.noise`.
pub fn pretrain(model: Model<f32>, upstream: &Dataset, test: Option<&Dataset>, plan: &TrainPlan) -> Result<TrainOutcome, TrainFailure> {
    if plan.stage != Stage::Pretrain {
        return Err(Error::Domain("pretrain needs a pretrain-stage plan".into()).into());
    }
    run(model, upstream, test, plan)
}

/// Copy of `model` with all body parameters and statistics kept and a freshly
/// initialized head of `classes` outputs.
pub fn swap_head(model: &Model<f32>, classes: usize, seed: u64) -> Result<Model<f32>> {
    let mut m = model.clone();
    m.replace_head(classes, seed)?;
    Ok(m)
}

/// Fine-tune on `downstream`. The noise set is forced to `{0}` unless
/// `plan.allow_noisy_finetune` is set.
pub fn finetune(model: Model<f32>, downstream: &Dataset, test: Option<&Dataset>, plan: &TrainPlan) -> Result<TrainOutcome, TrainFailure> {
    if plan.stage != Stage::Finetune {
        return Err(Error::Domain("finetune needs a finetune-stage plan".into()).into());
    }
    let mut plan = plan.clone();
    if !plan.allow_noisy_finetune {
        plan.noise = NoiseSpec::clean(plan.noise.seed);
    }
    run(model, downstream, test, &plan)
}

/// One run per learning rate (serially, same seeds). Returns all runs and
/// the index of the best by final clean test accuracy (first on ties).
pub fn lr_sweep(
    model: &Model<f32>,
    train: &Dataset,
    test: &Dataset,
    plan: &TrainPlan,
    lrs: &[f64],
) -> Result<(Vec<(f64, Result<TrainOutcome, TrainFailure>)>, Option<usize>)> {
    if lrs.is_empty() {
        return Err(Error::Domain("learning-rate sweep is empty".into()));
    }
    let mut runs = Vec::with_capacity(lrs.len());
    for &lr in lrs {
        let mut p = plan.clone();
        p.sgd.base_lr = lr;
        let outcome = match p.stage {
            Stage::Pretrain => pretrain(model.clone(), train, Some(test), &p),
            Stage::Finetune => finetune(model.clone(), train, Some(test), &p),
        };
        runs.push((lr, outcome));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, (_, r)) in runs.iter().enumerate() {
        if let Ok(o) = r {
            let acc = o.report.final_clean_acc().unwrap_or(0.0);
            if best.is_none_or(|(_, b)| acc > b) {
                best = Some((i, acc));
            }
        }
    }
    Ok((runs, best.map(|(i, _)| i)))
}
