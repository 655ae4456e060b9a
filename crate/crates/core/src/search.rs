//! First-order bi-level search: architecture steps on validation twin views
//! alternate with weight steps on training twin views, both scored by the
//! redundancy-reduction loss. Labels are never read.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{epoch_batches, make_twin_views, AugmentationPolicy, Dataset, TwinBatch};
use crate::error::{Error, Result};
use crate::losses::{barlow_twins_loss, cross_correlation, total_arch_loss, zero_one_loss};
use crate::nn::{
    derive_genotype, ArchParams, DeriveMode, Genotype, Mode, Network, ParamId, Relaxation, SupernetConfig,
    DEFAULT_THRESHOLD,
};
use crate::seed::derive_seed;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub arch_lr: f64,
    /// Decoupled decay on α: `α ← α·(1 − arch_lr·arch_weight_decay) − arch_lr·∇α`.
    pub arch_weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub w01: f64,
    /// Epochs over which the zero-one weight ramps linearly from 0 to `w01`.
    pub w01_ramp_epochs: f64,
    pub lambda_bt: f64,
    pub seed: u64,
    pub val_fraction: f64,
    /// Global-norm clip on weight gradients; 0 disables.
    pub grad_clip: f64,
    /// Redundancy-reduction losses above this count as divergence.
    pub divergence_threshold: f64,
    pub relaxation: Relaxation,
    pub derive: DeriveMode,
    pub threshold: f64,
    /// Twin-view transforms; defaults to crop, flip and color jitter sized
    /// for the input.
    pub augmentation: Option<AugmentationPolicy>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lr0: 0.025,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 3e-4,
            arch_lr: 3e-4,
            arch_weight_decay: 1e-3,
            batch_size: 32,
            epochs: 100,
            w01: 1.0,
            w01_ramp_epochs: 10.0,
            lambda_bt: 5e-3,
            seed: 0,
            val_fraction: 0.5,
            grad_clip: 5.0,
            divergence_threshold: 1e4,
            relaxation: Relaxation::Sigmoid,
            derive: DeriveMode::SigmoidThreshold,
            threshold: DEFAULT_THRESHOLD,
            augmentation: None,
        }
    }
}

impl SearchConfig {
    /// CPU-scale search: batches of 8 and 10 epochs. Plain SGD on α needs a
    /// far larger step than 3e-4 to move σ(α) within a few hundred steps;
    /// the α decay is scaled down to keep the per-step shrink at 3e-7.
    pub fn desk() -> Self {
        SearchConfig {
            batch_size: 8,
            epochs: 10,
            arch_lr: 3.0,
            arch_weight_decay: 1e-7,
            w01_ramp_epochs: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("lr0", self.lr0), ("arch_lr", self.arch_lr)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("lr_min", self.lr_min),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("arch_weight_decay", self.arch_weight_decay),
            ("w01", self.w01),
            ("w01_ramp_epochs", self.w01_ramp_epochs),
            ("lambda_bt", self.lambda_bt),
            ("grad_clip", self.grad_clip),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.lr_min > self.lr0 {
            return Err(Error::Parameter("lr_min exceeds lr0".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Parameter(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Parameter(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if let Some(p) = &self.augmentation {
            p.validate()?;
        }
        Ok(())
    }

    /// Zero-one weight after `progress` epochs (fractional).
    pub fn w01_at(&self, progress: f64) -> f64 {
        if self.w01_ramp_epochs == 0.0 {
            self.w01
        } else {
            self.w01 * (progress / self.w01_ramp_epochs).min(1.0)
        }
    }
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Seeded partition that never looks at labels. The validation side gets
/// `round(N·val_fraction)` samples.
pub fn split_unlabeled(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Parameter(format!("val_fraction {val_fraction} outside (0, 1)")));
    }
    let n = dataset.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::Data(format!(
            "splitting {n} samples at {val_fraction} leaves one side empty"
        )));
    }
    let mut order = epoch_batches(n, n, derive_seed(seed, "split_unlabeled", &[]), 0)
        .pop()
        .unwrap_or_default();
    let mut val: Vec<usize> = order.split_off(n - n_val);
    order.sort_unstable();
    val.sort_unstable();
    Ok((dataset.subset(&order), dataset.subset(&val)))
}

/// Supernet weights ω, architecture weights α, and optimizer state.
#[derive(Clone)]
pub struct SupernetState<T: Real> {
    pub net: Network<T>,
    pub arch: ArchParams<T>,
    /// Momentum buffer per trainable weight. α uses plain SGD and has none.
    pub momentum: Vec<(ParamId, Tensor<T>)>,
    pub step: usize,
    pub epoch: usize,
}

impl<T: Real> SupernetState<T> {
    pub fn new(config: &SupernetConfig, relaxation: Relaxation, seed: u64) -> Result<Self> {
        let net = Network::supernet(config, derive_seed(seed, "supernet_init", &[]))?;
        let momentum = net
            .params()
            .trainable_ids()
            .map(|id| (id, Tensor::zeros(net.params().get(id).shape())))
            .collect();
        Ok(SupernetState {
            arch: ArchParams::zeros(config.nodes_per_cell, &config.ops, relaxation),
            net,
            momentum,
            step: 0,
            epoch: 0,
        })
    }

    pub fn weights_checksum(&self) -> u64 {
        self.net.params().checksum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArchStepLosses {
    pub barlow_twins: f64,
    pub zero_one: f64,
    pub total: f64,
}

fn check_loss(value: f64, step: usize, threshold: f64) -> Result<()> {
    if !value.is_finite() || value > threshold {
        return Err(Error::Divergence { step, loss: value });
    }
    Ok(())
}

/// Loss and α gradients (normal, reduce) of one architecture step at
/// zero-one weight `w01`.
pub fn arch_gradients<T: Real>(
    state: &SupernetState<T>,
    batch: &TwinBatch,
    config: &SearchConfig,
    w01: f64,
) -> Result<(ArchStepLosses, Tensor<T>, Tensor<T>)> {
    let tape = Tape::new();
    let mut b = state.net.bind(&tape, Mode::Train, false);
    let arch = state.arch.bind(&tape, true);
    let za = state.net.embed(&mut b, tape.constant(batch.view_a.cast()), Some(&arch.mix))?;
    let zb = state.net.embed(&mut b, tape.constant(batch.view_b.cast()), Some(&arch.mix))?;
    let bt = barlow_twins_loss(cross_correlation(za, zb)?, config.lambda_bt);
    // Both tables have the same size, so the mean over all α is the mean of
    // the two table means.
    let zo = zero_one_loss(arch.normal).add(zero_one_loss(arch.reduce)).scale(T::lit(0.5));
    let total = total_arch_loss(bt, zo, w01);
    let losses = ArchStepLosses {
        barlow_twins: bt.value().item().to_f64_lossy(),
        zero_one: zo.value().item().to_f64_lossy(),
        total: total.value().item().to_f64_lossy(),
    };
    check_loss(losses.barlow_twins, state.step, config.divergence_threshold)?;
    check_loss(losses.total, state.step, f64::INFINITY)?;
    let grads = tape.backward(total);
    Ok((losses, grads.get_or_zeros(arch.normal), grads.get_or_zeros(arch.reduce)))
}

/// One α update on validation views; ω (including running statistics) is
/// left untouched.
pub fn arch_step<T: Real>(
    state: &mut SupernetState<T>,
    batch: &TwinBatch,
    config: &SearchConfig,
    w01: f64,
) -> Result<ArchStepLosses> {
    let (losses, gn, gr) = arch_gradients(state, batch, config, w01)?;
    let lr = T::lit(config.arch_lr);
    let keep = T::one() - lr * T::lit(config.arch_weight_decay);
    for (a, g) in [(&mut state.arch.normal, gn), (&mut state.arch.reduce, gr)] {
        for (v, &d) in a.data_mut().iter_mut().zip(g.data()) {
            *v = *v * keep - lr * d;
        }
    }
    Ok(losses)
}

/// One SGD-with-momentum update of ω at learning rate `lr`; α is left
/// untouched. Returns the redundancy-reduction loss before the update.
pub fn weight_step<T: Real>(
    state: &mut SupernetState<T>,
    batch: &TwinBatch,
    config: &SearchConfig,
    lr: f64,
) -> Result<f64> {
    let (loss, grads, stats) = {
        let tape = Tape::new();
        let mut b = state.net.bind(&tape, Mode::Train, true);
        let arch = state.arch.bind(&tape, false);
        let za = state.net.embed(&mut b, tape.constant(batch.view_a.cast()), Some(&arch.mix))?;
        let zb = state.net.embed(&mut b, tape.constant(batch.view_b.cast()), Some(&arch.mix))?;
        let bt = barlow_twins_loss(cross_correlation(za, zb)?, config.lambda_bt);
        let loss = bt.value().item().to_f64_lossy();
        check_loss(loss, state.step, config.divergence_threshold)?;
        let g = tape.backward(bt);
        (loss, b.gradients(&g), b.take_stats())
    };
    sgd_update(
        &mut state.net,
        &mut state.momentum,
        grads,
        lr,
        config.momentum,
        config.weight_decay,
        config.grad_clip,
    );
    state.net.absorb_stats(&stats);
    Ok(loss)
}

/// `v ← μ·v + (g + wd·w)`, `w ← w − lr·v`, after clipping the raw
/// gradients to global norm `clip` (0 disables).
pub(crate) fn sgd_update<T: Real>(
    net: &mut Network<T>,
    momentum: &mut [(ParamId, Tensor<T>)],
    mut grads: Vec<(ParamId, Tensor<T>)>,
    lr: f64,
    mu: f64,
    wd: f64,
    clip: f64,
) {
    if clip > 0.0 {
        let norm: f64 = grads
            .iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt();
        if norm > clip {
            let s = T::lit(clip / norm);
            for (_, g) in grads.iter_mut() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
    }
    let (lr, mu, wd) = (T::lit(lr), T::lit(mu), T::lit(wd));
    for ((id, g), (mid, v)) in grads.iter().zip(momentum.iter_mut()) {
        debug_assert_eq!(id, mid);
        let w = net.params_mut().get_mut(*id);
        for ((wv, &gv), vv) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + gv + wd * *wv;
            *wv -= lr * *vv;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_train: f64,
    pub loss_val: f64,
    pub loss_zero_one: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// σ(α) over every architecture weight after an epoch (epoch 0 is the
/// initial state).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaHistogram {
    pub epoch: usize,
    /// Ten equal bins over [0, 1].
    pub bins: Vec<usize>,
    /// Fraction of σ(α) inside [0.4, 0.6].
    pub mid_fraction: f64,
}

impl SigmaHistogram {
    pub fn of<T: Real>(arch: &ArchParams<T>, epoch: usize) -> Self {
        let sig: Vec<f64> = arch
            .flat()
            .iter()
            .map(|&a| crate::autodiff::sigmoid(a.to_f64_lossy()))
            .collect();
        let mut bins = vec![0; 10];
        for &s in &sig {
            bins[((s * 10.0) as usize).min(9)] += 1;
        }
        let mid = sig.iter().filter(|&&s| (0.4..=0.6).contains(&s)).count();
        SigmaHistogram {
            epoch,
            bins,
            mid_fraction: mid as f64 / sig.len().max(1) as f64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchHistory {
    pub steps: Vec<StepRecord>,
    pub sigma: Vec<SigmaHistogram>,
}

impl SearchHistory {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "step,loss_train,loss_val,loss_zero_one,lr,seconds")?;
        for r in &self.steps {
            writeln!(
                w,
                "{},{},{},{},{},{:.6}",
                r.step, r.loss_train, r.loss_val, r.loss_zero_one, r.lr, r.seconds
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

pub struct SearchRun {
    pub genotype: Genotype,
    pub state: SupernetState<f32>,
    pub history: SearchHistory,
}

impl std::fmt::Debug for SearchRun {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SearchRun({:?}, {} steps)", self.genotype, self.history.steps.len())
    }
}

/// A failed search with everything recorded up to the failure.
pub struct SearchFailure {
    pub error: Error,
    pub state: Option<Box<SupernetState<f32>>>,
    pub history: SearchHistory,
}

impl std::fmt::Debug for SearchFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SearchFailure({:?}, {} steps)", self.error, self.history.steps.len())
    }
}

impl From<Error> for SearchFailure {
    fn from(error: Error) -> Self {
        SearchFailure {
            error,
            state: None,
            history: SearchHistory::default(),
        }
    }
}

/// Twin views of a batch of images; the transform seed depends only on the
/// global seed, the role, the epoch and the batch index.
fn views(data: &Dataset, indices: &[usize], policy: &AugmentationPolicy, seed: u64, role: &str, epoch: usize, batch: usize) -> TwinBatch {
    let images = data.image_batch::<f32>(indices);
    make_twin_views(&images, policy, derive_seed(seed, role, &[epoch as u64, batch as u64]))
        .with_source_indices(indices.to_vec())
}

/// Full search; see [`run_search_with`].
pub fn run_search(
    dataset: &Dataset,
    net_config: &SupernetConfig,
    config: &SearchConfig,
) -> std::result::Result<SearchRun, SearchFailure> {
    run_search_with(dataset, net_config, config, &mut |_, _| Ok(()))
}

/// Alternates one architecture step and one weight step per training batch
/// for `epochs · ⌊N_train/batch_size⌋` steps, then derives the genotype.
/// `on_epoch` runs after every completed epoch (for checkpoints).
pub fn run_search_with(
    dataset: &Dataset,
    net_config: &SupernetConfig,
    config: &SearchConfig,
    on_epoch: &mut dyn FnMut(&SupernetState<f32>, &SearchHistory) -> Result<()>,
) -> std::result::Result<SearchRun, SearchFailure> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("search dataset is empty".into()).into());
    }
    let (c, h, w) = dataset.image_shape();
    if c != net_config.input_channels || h != net_config.input_side || w != net_config.input_side {
        return Err(Error::Structural(format!(
            "images are {c}×{h}×{w}, network expects {}×{s}×{s}",
            net_config.input_channels,
            s = net_config.input_side
        ))
        .into());
    }
    let (train, val) = split_unlabeled(dataset, config.val_fraction, config.seed)?;
    let per_epoch = train.len() / config.batch_size;
    if config.epochs > 0 && (per_epoch == 0 || val.len() < config.batch_size) {
        return Err(Error::Parameter(format!(
            "batch size {} exceeds a split ({} train, {} val)",
            config.batch_size,
            train.len(),
            val.len()
        ))
        .into());
    }
    let total = config.epochs * per_epoch;
    let policy = config.augmentation.clone().unwrap_or_else(|| AugmentationPolicy::twin(h));
    let mut state = SupernetState::<f32>::new(net_config, config.relaxation, config.seed)?;
    let mut history = SearchHistory::default();
    history.sigma.push(SigmaHistogram::of(&state.arch, 0));
    let start = Instant::now();
    let fail = |error: Error, state: SupernetState<f32>, history: SearchHistory| SearchFailure {
        error,
        state: Some(Box::new(state)),
        history,
    };
    for epoch in 0..config.epochs {
        state.epoch = epoch;
        let train_batches = epoch_batches(train.len(), config.batch_size, derive_seed(config.seed, "train_order", &[]), epoch);
        let val_batches = epoch_batches(val.len(), config.batch_size, derive_seed(config.seed, "val_order", &[]), epoch);
        for (bi, tb) in train_batches.iter().enumerate() {
            let progress = epoch as f64 + bi as f64 / per_epoch as f64;
            let w01 = config.w01_at(progress);
            let vb = &val_batches[bi % val_batches.len()];
            let val_views = views(&val, vb, &policy, config.seed, "val_views", epoch, bi);
            let arch = match arch_step(&mut state, &val_views, config, w01) {
                Ok(l) => l,
                Err(e) => return Err(fail(e, state, history)),
            };
            let lr = cosine_lr(state.step, total, config.lr0, config.lr_min);
            let train_views = views(&train, tb, &policy, config.seed, "train_views", epoch, bi);
            let loss_train = match weight_step(&mut state, &train_views, config, lr) {
                Ok(l) => l,
                Err(e) => return Err(fail(e, state, history)),
            };
            history.steps.push(StepRecord {
                step: state.step,
                loss_train,
                loss_val: arch.barlow_twins,
                loss_zero_one: arch.zero_one,
                lr,
                seconds: start.elapsed().as_secs_f64(),
            });
            state.step += 1;
        }
        state.epoch = epoch + 1;
        history.sigma.push(SigmaHistogram::of(&state.arch, epoch + 1));
        if let Err(e) = on_epoch(&state, &history) {
            return Err(fail(e, state, history));
        }
    }
    match derive_genotype(&state.arch, config.derive, config.threshold) {
        Ok(genotype) => Ok(SearchRun {
            genotype,
            state,
            history,
        }),
        Err(e) => Err(fail(e, state, history)),
    }
}
