//! Long-tailed subsampling: `n_c ← ⌊β^(c+1)·n_c⌋`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Largest relative gap between the requested and the floored imbalance
/// factor that [`plan_for_rho`] accepts before refining β.
pub const RHO_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTailPlan {
    pub beta: f64,
    pub rho: f64,
    pub original_counts: Vec<usize>,
    pub lt_counts: Vec<usize>,
}

/// Largest class size over smallest.
pub fn imbalance_factor(counts: &[usize]) -> f64 {
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    max as f64 / min as f64
}

/// Floor that treats values within 1e-9 below an integer as that integer,
/// so exact products such as `(10^(-1/9))^9 · 5000 = 500` are not lost to
/// rounding in `powi`.
fn floor_count(x: f64) -> f64 {
    (x + 1e-9).floor()
}

pub fn build_long_tail(counts: &[usize], beta: f64) -> Result<LongTailPlan> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Parameter(format!("beta must lie in (0, 1], got {beta}")));
    }
    if counts.is_empty() {
        return Err(Error::Parameter("no classes".into()));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Parameter(format!("class {c} has no samples")));
    }
    let mut lt_counts = Vec::with_capacity(counts.len());
    for (c, &n) in counts.iter().enumerate() {
        let kept = floor_count(beta.powi(c as i32 + 1) * n as f64);
        if kept < 1.0 {
            return Err(Error::UnsatisfiableImbalance {
                class: c,
                count: kept as u64,
            });
        }
        lt_counts.push(kept as usize);
    }
    Ok(LongTailPlan {
        beta,
        rho: imbalance_factor(&lt_counts),
        original_counts: counts.to_vec(),
        lt_counts,
    })
}

/// β for which the un-floored counts of `class_count` equal classes have
/// imbalance factor exactly `rho`.
pub fn beta_for_rho(rho: f64, class_count: usize) -> Result<f64> {
    if !(rho >= 1.0) || !rho.is_finite() {
        return Err(Error::Parameter(format!("rho must be a finite value >= 1, got {rho}")));
    }
    if class_count < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 classes to form an imbalance, got {class_count}"
        )));
    }
    Ok(rho.powf(-1.0 / (class_count as f64 - 1.0)))
}

/// Plan targeting imbalance factor `rho`.
///
/// Starts from [`beta_for_rho`]. Flooring can move the achieved factor far
/// from the target when the tail class is small (e.g. 2.99 → 2 samples); if
/// the analytic β misses by more than [`RHO_TOLERANCE`], β is moved to the
/// breakpoint (where the head or tail class gains a sample) whose floored
/// factor is closest to `rho`. The returned plan always satisfies
/// `lt_counts[c] = ⌊β^(c+1)·counts[c]⌋` for its own β, and reports the
/// achieved factor, which may still miss the target when no β reaches it.
pub fn plan_for_rho(counts: &[usize], rho: f64) -> Result<LongTailPlan> {
    let beta = beta_for_rho(rho, counts.len())?;
    let plan = build_long_tail(counts, beta)?;
    let miss = |p: &LongTailPlan| (p.rho - rho).abs() / rho;
    if miss(&plan) <= RHO_TOLERANCE {
        return Ok(plan);
    }
    let mut best = plan;
    for class in [0, counts.len() - 1] {
        let n = counts[class] as f64;
        let power = class as i32 + 1;
        for k in 1..=counts[class] {
            // Smallest β with ⌊β^(class+1)·n⌋ = k.
            let b = (k as f64 / n).powf(1.0 / power as f64);
            if !(b > 0.0 && b <= 1.0) {
                continue;
            }
            let Ok(candidate) = build_long_tail(counts, b) else {
                continue;
            };
            let (mc, mb) = (miss(&candidate), miss(&best));
            if mc < mb || (mc == mb && (candidate.beta - beta).abs() < (best.beta - beta).abs()) {
                best = candidate;
            }
        }
    }
    Ok(best)
}

/// Seeded per-class draw without replacement. Returned indices are in
/// ascending dataset order.
pub fn subsample_indices(dataset: &Dataset, plan: &LongTailPlan, seed: u64) -> Result<Vec<usize>> {
    if plan.lt_counts.len() != dataset.class_count() {
        return Err(Error::Parameter(format!(
            "plan covers {} classes, dataset has {}",
            plan.lt_counts.len(),
            dataset.class_count()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut selected = Vec::with_capacity(plan.lt_counts.iter().sum());
    for (c, (members, &want)) in by_class.iter_mut().zip(&plan.lt_counts).enumerate() {
        if members.len() < want {
            return Err(Error::InsufficientSamples {
                class: c,
                available: members.len(),
                required: want,
            });
        }
        members.shuffle(&mut rng_for(seed, "subsample", &[c as u64]));
        selected.extend_from_slice(&members[..want]);
    }
    selected.sort_unstable();
    Ok(selected)
}

/// Train-split subsampling to the plan's per-class counts.
pub fn subsample_to_plan(dataset: &Dataset, plan: &LongTailPlan, seed: u64) -> Result<Dataset> {
    let indices = subsample_indices(dataset, plan, seed)?;
    Ok(dataset.subset(&indices))
}
