//! Supervised fine-tuning of a discrete network with a classifier head,
//! evaluation metrics, transfer to a new label set and the loss ablation.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::data::{epoch_batches, AugmentationPolicy, Dataset};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, focal_logit_adjusted, focal_loss, logit_adjusted_ce, FocalParams, ImbalancePriors};
use crate::nn::{BatchNormIds, Genotype, Mode, Network, ParamId, ParamStore, SupernetConfig};
use crate::search::{cosine_lr, sgd_update};
use crate::seed::{derive_seed, Fnv1a};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "CE+LA")]
    CeLa,
    #[serde(rename = "FL")]
    Fl,
    #[serde(rename = "FL+LA")]
    FlLa,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [LossMode::Ce, LossMode::CeLa, LossMode::Fl, LossMode::FlLa];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Ce => "CE",
            LossMode::CeLa => "CE+LA",
            LossMode::Fl => "FL",
            LossMode::FlLa => "FL+LA",
        }
    }

    /// Row label in the ablation table.
    pub fn method(self) -> &'static str {
        match self {
            LossMode::Ce => "CE",
            LossMode::CeLa => "CE + Logit adj.",
            LossMode::Fl => "FL",
            LossMode::FlLa => "FL + Logit adj.",
        }
    }

    fn focal(self) -> bool {
        matches!(self, LossMode::Fl | LossMode::FlLa)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parameter(format!("unknown loss mode {s:?} (expected CE, CE+LA, FL or FL+LA)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Upper bound on epochs; early stopping may end sooner.
    pub epochs: usize,
    /// Epochs without a `min_delta` improvement of the mean training loss
    /// before stopping; 0 disables early stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub loss_mode: LossMode,
    pub focal: FocalParams,
    pub tau: f64,
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    /// Training transforms; defaults to crop and flip sized for the input.
    pub augmentation: Option<AugmentationPolicy>,
    /// Start from fresh batch-norm running statistics.
    pub reset_running_stats: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 600,
            patience: 20,
            min_delta: 1e-4,
            loss_mode: LossMode::FlLa,
            focal: FocalParams::default(),
            tau: 1.0,
            lr0: 0.025,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 3e-4,
            batch_size: 32,
            grad_clip: 5.0,
            augmentation: None,
            reset_running_stats: true,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// CPU-scale budget: 8 epochs, everything else at its default.
    pub fn desk() -> Self {
        FinetuneConfig {
            epochs: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("fine-tuning needs at least one epoch".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Parameter(format!("lr0 must be positive, got {}", self.lr0)));
        }
        for (name, v) in [
            ("lr_min", self.lr_min),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
            ("min_delta", self.min_delta),
            ("tau", self.tau),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.lr_min > self.lr0 {
            return Err(Error::Parameter("lr_min exceeds lr0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if let Some(p) = &self.augmentation {
            p.validate()?;
        }
        Ok(())
    }
}

/// Training loss of `logits` under `mode`.
pub fn training_loss<'t, T: Real>(
    mode: LossMode,
    logits: Var<'t, T>,
    labels: &[usize],
    priors: &ImbalancePriors,
    focal: &FocalParams,
) -> Result<Var<'t, T>> {
    match mode {
        LossMode::Ce => cross_entropy(logits, labels),
        LossMode::CeLa => logit_adjusted_ce(logits, labels, priors),
        LossMode::Fl => focal_loss(logits, labels, focal),
        LossMode::FlLa => focal_logit_adjusted(logits, labels, priors, focal),
    }
}

/// Loss, trainable-parameter gradients, batch-norm statistics and logits
/// of one training-mode forward pass.
pub struct StepGradients<T: Real> {
    pub loss: f64,
    pub grads: Vec<(ParamId, Tensor<T>)>,
    pub stats: Vec<(BatchNormIds, BatchStats<T>)>,
    pub logits: Tensor<T>,
}

pub fn step_gradients<T: Real>(
    net: &Network<T>,
    images: Tensor<T>,
    labels: &[usize],
    mode: LossMode,
    priors: &ImbalancePriors,
    focal: &FocalParams,
) -> Result<StepGradients<T>> {
    let tape = Tape::new();
    let mut b = net.bind(&tape, Mode::Train, true);
    let logits = net.forward(&mut b, tape.constant(images), None)?;
    let loss = training_loss(mode, logits, labels, priors, focal)?;
    let value = loss.value().item().to_f64_lossy();
    let g = tape.backward(loss);
    Ok(StepGradients {
        loss: value,
        grads: b.gradients(&g),
        stats: b.take_stats(),
        logits: logits.value().as_ref().clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy on the augmented training batches, in percent.
    pub train_accuracy: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneHistory {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Hash of every batch's indices and augmented pixels, in order. Equal
    /// across loss modes for the same seed and data.
    pub data_checksum: u64,
}

/// Trains every weight of `net` (trunk and head) on labelled data with SGD,
/// momentum and a per-step cosine schedule. Priors come from the training
/// split's class frequencies.
pub fn finetune<T: Real>(
    mut net: Network<T>,
    train: &Dataset,
    config: &FinetuneConfig,
) -> Result<(Network<T>, FinetuneHistory)> {
    config.validate()?;
    let classes = net
        .num_classes()
        .ok_or_else(|| Error::Structural("fine-tuning needs a classifier head".into()))?;
    if classes != train.class_count() {
        return Err(Error::Structural(format!(
            "head has {classes} outputs but the training set has {} classes",
            train.class_count()
        )));
    }
    check_input(net.config(), train)?;
    if config.loss_mode.focal() {
        config.focal.validate(classes)?;
    }
    let priors = ImbalancePriors::from_counts(&train.class_counts(), config.tau)?;
    if config.reset_running_stats {
        net.reset_running_stats();
    }

    let batch = config.batch_size.min(train.len());
    if batch < 2 {
        return Err(Error::BatchTooSmall(batch));
    }
    let per_epoch = train.len() / batch;
    let total = config.epochs * per_epoch;
    let policy = config
        .augmentation
        .clone()
        .unwrap_or_else(|| AugmentationPolicy::light(net.config().input_side));
    let labels = train.labels().to_vec();
    let mut momentum: Vec<(ParamId, Tensor<T>)> = net
        .params()
        .trainable_ids()
        .map(|id| (id, Tensor::zeros(net.params().get(id).shape())))
        .collect();
    let order_seed = derive_seed(config.seed, "finetune_order", &[]);
    let mut history = FinetuneHistory::default();
    let mut stream = Fnv1a::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let start = Instant::now();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        let mut lr = config.lr0;
        for (bi, idx) in epoch_batches(train.len(), batch, order_seed, epoch).iter().enumerate() {
            let raw = train.image_batch::<f32>(idx);
            let seed = derive_seed(config.seed, "finetune_augment", &[epoch as u64, bi as u64]);
            let images = policy.apply_batch(&raw, seed, "finetune");
            for &i in idx {
                stream.write_u64(i as u64);
            }
            stream.write_u64(images.checksum());
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let out = step_gradients(&net, images.cast(), &y, config.loss_mode, &priors, &config.focal)?;
            if !out.loss.is_finite() {
                return Err(Error::Divergence { step, loss: out.loss });
            }
            lr = cosine_lr(step, total, config.lr0, config.lr_min);
            sgd_update(
                &mut net,
                &mut momentum,
                out.grads,
                lr,
                config.momentum,
                config.weight_decay,
                config.grad_clip,
            );
            net.absorb_stats(&out.stats);
            loss_sum += out.loss * y.len() as f64;
            correct += argmax_rows(&out.logits).iter().zip(&y).filter(|(p, t)| p == t).count();
            seen += y.len();
            step += 1;
        }
        let loss = loss_sum / seen as f64;
        history.epochs.push(EpochRecord {
            epoch,
            loss,
            train_accuracy: 100.0 * correct as f64 / seen as f64,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        });
        if loss < best - config.min_delta {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if config.patience > 0 && stale >= config.patience {
                history.stopped_early = epoch + 1 < config.epochs;
                break;
            }
        }
    }
    history.data_checksum = stream.finish();
    Ok((net, history))
}

fn check_input(config: &SupernetConfig, data: &Dataset) -> Result<()> {
    let (c, h, w) = data.image_shape();
    if c != config.input_channels || h != config.input_side || w != config.input_side {
        return Err(Error::Structural(format!(
            "images are {c}×{h}×{w}, network expects {}×{s}×{s}",
            config.input_channels,
            s = config.input_side
        )));
    }
    Ok(())
}

/// Index of the largest entry per row; ties go to the lower class.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let (_, l) = logits.dims2();
    logits
        .data()
        .chunks(l)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Percent.
    pub top1_error: f64,
    /// Percent; `100 − top1_error`.
    pub accuracy: f64,
    /// Fraction of each class's test samples predicted correctly; 0 for a
    /// class without test samples.
    pub per_class_recall: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub param_count: usize,
}

impl Metrics {
    pub fn from_predictions(predicted: &[usize], truth: &[usize], classes: usize, param_count: usize) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::Structural(format!(
                "{} predictions for {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::Data("empty test set".into()));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= classes || t >= classes {
                return Err(Error::Data(format!("class id {} out of range for {classes} classes", p.max(t))));
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let accuracy = 100.0 * correct as f64 / truth.len() as f64;
        let per_class_recall = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[c] as f64 / n as f64
                }
            })
            .collect();
        Ok(Metrics {
            top1_error: 100.0 - accuracy,
            accuracy,
            per_class_recall,
            confusion,
            param_count,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.top1_error.is_finite() && self.per_class_recall.iter().all(|r| r.is_finite())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn write_confusion_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let l = self.confusion.len();
        write!(w, "true\\predicted")?;
        for c in 0..l {
            write!(w, ",{c}")?;
        }
        writeln!(w)?;
        for (t, row) in self.confusion.iter().enumerate() {
            write!(w, "{t}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_confusion_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_confusion_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

const EVAL_BATCH: usize = 256;

/// Top-1 metrics with evaluation-mode batch statistics and raw logits.
pub fn evaluate<T: Real>(model: &Network<T>, test: &Dataset) -> Result<Metrics> {
    let classes = model
        .num_classes()
        .ok_or_else(|| Error::Structural("evaluation needs a classifier head".into()))?;
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    check_input(model.config(), test)?;
    let mut predicted = Vec::with_capacity(test.len());
    let all: Vec<usize> = (0..test.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let logits = model.predict(&test.image_batch::<T>(idx))?;
        if !logits.all_finite() {
            return Err(Error::Numeric("non-finite logits during evaluation".into()));
        }
        predicted.extend(argmax_rows(&logits));
    }
    Metrics::from_predictions(&predicted, test.labels(), classes, model.count_parameters())
}

/// Rebuild a discrete network from its genotype and stored weights. A
/// `head.weight` entry in the store brings its classifier back with it.
pub fn restore_network(config: &SupernetConfig, genotype: &Genotype, weights: &ParamStore<f32>) -> Result<Network<f32>> {
    let mut net = Network::from_genotype(config, genotype, 0)?;
    if let Some(id) = weights.id("head.weight") {
        net.attach_head(weights.get(id).shape()[0])?;
    }
    net.load_from(weights, &[])?;
    Ok(net)
}

/// Resize and channel-adapt a dataset to the network's input format
/// (bilinear with half-pixel centers; gray ↔ RGB by replication or mean).
pub fn adapt_dataset(config: &SupernetConfig, data: &Dataset) -> Result<Dataset> {
    Ok(data.with_channels(config.input_channels)?.resized(config.input_side))
}

/// Discrete network from `genotype` with every trunk weight taken from
/// `weights` and a fresh head for `classes` outputs.
pub fn prepare_network(
    config: &SupernetConfig,
    genotype: &Genotype,
    weights: &ParamStore<f32>,
    classes: usize,
    seed: u64,
) -> Result<Network<f32>> {
    let mut net = Network::from_genotype(config, genotype, seed)?;
    net.load_from(weights, &[])?;
    net.attach_head(classes)?;
    Ok(net)
}

pub struct TransferOutcome {
    pub metrics: Metrics,
    pub network: Network<f32>,
    pub history: FinetuneHistory,
}

/// Retains the trunk weights, replaces the head for the new class count,
/// fine-tunes on `new_train` and evaluates on `new_test`. Both sets are
/// adapted to the network's input format first.
pub fn transfer(
    net_config: &SupernetConfig,
    genotype: &Genotype,
    weights: &ParamStore<f32>,
    new_train: &Dataset,
    new_test: &Dataset,
    config: &FinetuneConfig,
) -> Result<TransferOutcome> {
    if new_train.class_count() != new_test.class_count() {
        return Err(Error::Data(format!(
            "train set has {} classes, test set {}",
            new_train.class_count(),
            new_test.class_count()
        )));
    }
    let train = adapt_dataset(net_config, new_train)?;
    let test = adapt_dataset(net_config, new_test)?;
    let mut net = Network::from_genotype(net_config, genotype, config.seed)?;
    net.load_from(weights, &["head."])?;
    net.attach_head(train.class_count())?;
    let (network, history) = finetune(net, &train, config)?;
    let metrics = evaluate(&network, &test)?;
    Ok(TransferOutcome {
        metrics,
        network,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub metrics: Option<Metrics>,
    pub data_checksum: Option<u64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: LossMode,
    pub runs: Vec<AblationRun>,
}

impl AblationRow {
    fn successful(&self) -> impl Iterator<Item = &Metrics> {
        self.runs.iter().filter_map(|r| r.metrics.as_ref())
    }

    /// Median top-1 error over the successful runs.
    pub fn median_error(&self) -> Option<f64> {
        median(self.successful().map(|m| m.top1_error).collect())
    }

    /// Median recall of the class with the fewest training samples.
    pub fn median_recall(&self, class: usize) -> Option<f64> {
        median(self.successful().map(|m| m.per_class_recall[class]).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Class with the fewest training samples (lowest id on ties).
    pub rarest_class: usize,
}

impl AblationTable {
    pub fn row(&self, mode: LossMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    /// Two-column table: method and median top-1 error in percent.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Method | Error |\n|---|---|\n");
        for row in &self.rows {
            let cell = match row.median_error() {
                Some(e) => format!("{e:.2}"),
                None => "failed".to_string(),
            };
            out.push_str(&format!("| {} | {cell} |\n", row.mode.method()));
        }
        out
    }
}

/// Middle value, mean of the two middle values for even counts.
pub fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Fine-tunes and evaluates every loss mode for every seed from the same
/// starting weights. A failing run is recorded in its cell and the table
/// is still produced.
pub fn run_ablation(
    net_config: &SupernetConfig,
    genotype: &Genotype,
    weights: &ParamStore<f32>,
    train: &Dataset,
    test: &Dataset,
    base: &FinetuneConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    let counts = train.class_counts();
    let rarest_class = (0..counts.len()).min_by_key(|&c| counts[c]).unwrap_or(0);
    let mut rows = Vec::with_capacity(4);
    for mode in LossMode::ALL {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let config = FinetuneConfig {
                loss_mode: mode,
                seed,
                ..base.clone()
            };
            let outcome = prepare_network(net_config, genotype, weights, train.class_count(), seed)
                .and_then(|net| finetune(net, train, &config))
                .and_then(|(net, h)| Ok((evaluate(&net, test)?, h)));
            runs.push(match outcome {
                Ok((metrics, h)) => AblationRun {
                    seed,
                    metrics: Some(metrics),
                    data_checksum: Some(h.data_checksum),
                    error: None,
                },
                Err(e) => AblationRun {
                    seed,
                    metrics: None,
                    data_checksum: None,
                    error: Some(e.to_string()),
                },
            });
        }
        rows.push(AblationRow { mode, runs });
    }
    Ok(AblationTable { rows, rarest_class })
}

#[cfg(test)]
mod tests;
