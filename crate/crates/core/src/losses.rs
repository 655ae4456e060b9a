//! Objective functions for search and fine-tuning.
//!
//! Every loss is built on the autodiff tape and reduces over the batch with
//! the mean.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Epsilon added to the per-dimension variance before standardizing
/// embeddings.
pub const CORRELATION_EPS: f64 = 1e-5;

/// D×D cross-correlation between two standardized embeddings.
#[derive(Clone, Copy, Debug)]
pub struct CorrelationMatrix<'t, T: Real>(pub Var<'t, T>);

impl<'t, T: Real> CorrelationMatrix<'t, T> {
    pub fn var(&self) -> Var<'t, T> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.value().dims2().0
    }
}

pub fn cross_correlation<'t, T: Real>(
    z_a: Var<'t, T>,
    z_b: Var<'t, T>,
) -> Result<CorrelationMatrix<'t, T>> {
    let (b, d) = z_a.value().dims2();
    let (b2, d2) = z_b.value().dims2();
    if (b, d) != (b2, d2) {
        return Err(Error::Structural(format!(
            "embedding shapes differ: {b}x{d} vs {b2}x{d2}"
        )));
    }
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let eps = T::lit(CORRELATION_EPS);
    let a = z_a.standardize_cols(eps);
    let bb = z_b.standardize_cols(eps);
    Ok(CorrelationMatrix(
        a.matmul_tn(bb, T::one() / T::lit(b as f64)),
    ))
}

/// `Σ_i (1 − C_ii)² + λ Σ_{i≠j} C_ij²`.
pub fn barlow_twins_loss<'t, T: Real>(c: CorrelationMatrix<'t, T>, lambda: f64) -> Var<'t, T> {
    let cv = c.0.value();
    let (d, d2) = cv.dims2();
    assert_eq!(d, d2, "correlation matrix must be square");
    let lam = T::lit(lambda);
    let two = T::lit(2.0);
    let mut on = T::zero();
    let mut off = T::zero();
    for i in 0..d {
        for j in 0..d {
            let v = cv.data()[i * d + j];
            if i == j {
                on += (T::one() - v) * (T::one() - v);
            } else {
                off += v * v;
            }
        }
    }
    let out = Tensor::scalar(on + lam * off);
    c.0.tape().push_op(
        out,
        &[c.0],
        Box::new(move |g, _| {
            let gv = g.item();
            let mut dc = Tensor::zeros(&[d, d]);
            for i in 0..d {
                for j in 0..d {
                    let v = cv.data()[i * d + j];
                    dc.data_mut()[i * d + j] = if i == j {
                        -two * (T::one() - v) * gv
                    } else {
                        two * lam * v * gv
                    };
                }
            }
            vec![Some(dc)]
        }),
    )
}

/// `−(1/N) Σ (σ(α_i) − ½)²` over every entry of `alphas`.
pub fn zero_one_loss<'t, T: Real>(alphas: Var<'t, T>) -> Var<'t, T> {
    alphas
        .sigmoid()
        .add_scalar(T::lit(-0.5))
        .square()
        .mean()
        .scale(-T::one())
}

/// Architecture objective: self-supervised loss plus the weighted zero-one
/// regularizer.
pub fn total_arch_loss<'t, T: Real>(ss_loss: Var<'t, T>, zo_loss: Var<'t, T>, w01: f64) -> Var<'t, T> {
    ss_loss.add(zo_loss.scale(T::lit(w01)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassWeight {
    Uniform(f64),
    PerClass(Vec<f64>),
}

impl ClassWeight {
    fn get(&self, class: usize) -> f64 {
        match self {
            ClassWeight::Uniform(w) => *w,
            ClassWeight::PerClass(ws) => ws[class],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha_t: ClassWeight,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            gamma: 2.0,
            alpha_t: ClassWeight::Uniform(1.0),
        }
    }
}

impl FocalParams {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Parameter(format!("focal gamma must be finite and >= 0, got {}", self.gamma)));
        }
        match &self.alpha_t {
            ClassWeight::Uniform(w) if *w > 0.0 => Ok(()),
            ClassWeight::PerClass(ws) if ws.len() == classes && ws.iter().all(|&w| w > 0.0) => Ok(()),
            other => Err(Error::Parameter(format!(
                "focal alpha_t must be positive (one per class), got {other:?}"
            ))),
        }
    }
}

/// Class priors `π` (empirical frequencies) with adjustment strength `τ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalancePriors {
    pi: Vec<f64>,
    tau: f64,
}

impl ImbalancePriors {
    pub fn new(pi: Vec<f64>, tau: f64) -> Result<Self> {
        if pi.is_empty() {
            return Err(Error::InvalidPrior("no classes".into()));
        }
        if let Some((c, p)) = pi.iter().enumerate().find(|(_, &p)| !(p > 0.0)) {
            return Err(Error::InvalidPrior(format!("class {c} has prior {p}")));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidPrior(format!("priors sum to {total}, not 1")));
        }
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(Error::InvalidPrior(format!("tau must be >= 0, got {tau}")));
        }
        Ok(ImbalancePriors { pi, tau })
    }

    /// Priors from per-class sample counts; an empty class is an error.
    pub fn from_counts(counts: &[usize], tau: f64) -> Result<Self> {
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidPrior(format!("class {c} has no training samples")));
        }
        let total: usize = counts.iter().sum();
        let pi: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
        let sum: f64 = pi.iter().sum();
        Self::new(pi.iter().map(|p| p / sum).collect(), tau)
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Per-class logit offsets `τ·log π_y`.
    pub fn offsets<T: Real>(&self) -> Vec<T> {
        self.pi.iter().map(|&p| T::lit(self.tau * p.ln())).collect()
    }
}

fn check_logits<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, l) = logits.dims2();
    if b != labels.len() {
        return Err(Error::Structural(format!(
            "{b} logit rows but {} labels",
            labels.len()
        )));
    }
    if b == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= l) {
        return Err(Error::Data(format!("label {y} out of range for {l} classes")));
    }
    if !logits.all_finite() {
        return Err(Error::Numeric("logits contain NaN or infinity".into()));
    }
    Ok((b, l))
}

/// Row-wise softmax probabilities and log-probabilities of the targets.
fn probabilities<T: Real>(logits: &Tensor<T>, labels: &[usize], l: usize) -> (Vec<T>, Vec<T>) {
    let mut probs = logits.data().to_vec();
    let mut log_pt = Vec::with_capacity(labels.len());
    for (row, (&y, src)) in probs
        .chunks_mut(l)
        .zip(labels.iter().zip(logits.data().chunks(l)))
    {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = src.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        log_pt.push(src[y] - lse);
        softmax_in_place(row);
    }
    (probs, log_pt)
}

/// Mean softmax cross-entropy.
pub fn cross_entropy<'t, T: Real>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let z = logits.value();
    let (b, l) = check_logits(&z, labels)?;
    let (probs, log_pt) = probabilities(&z, labels, l);
    let inv_b = T::one() / T::lit(b as f64);
    let loss = -log_pt.iter().copied().sum::<T>() * inv_b;
    let labels = labels.to_vec();
    Ok(logits.tape().push_op(
        Tensor::scalar(loss),
        &[logits],
        Box::new(move |g, _| {
            let gv = g.item();
            let mut dz = probs.clone();
            for (r, row) in dz.chunks_mut(l).enumerate() {
                for (k, v) in row.iter_mut().enumerate() {
                    let delta = if k == labels[r] { T::one() } else { T::zero() };
                    *v = (*v - delta) * inv_b * gv;
                }
            }
            vec![Some(Tensor::from_vec(&[b, l], dz))]
        }),
    ))
}

/// Mean multiclass focal loss `−α_t (1 − p_t)^γ log p_t` with
/// `p_t = softmax(logits)[label]`.
pub fn focal_loss<'t, T: Real>(
    logits: Var<'t, T>,
    labels: &[usize],
    params: &FocalParams,
) -> Result<Var<'t, T>> {
    let z = logits.value();
    let (b, l) = check_logits(&z, labels)?;
    params.validate(l)?;
    let (probs, log_pt) = probabilities(&z, labels, l);
    let gamma = T::lit(params.gamma);
    let inv_b = T::one() / T::lit(b as f64);
    let alphas: Vec<T> = labels.iter().map(|&y| T::lit(params.alpha_t.get(y))).collect();
    let mut loss = T::zero();
    // coef[r] multiplies (p_k − δ_k) in the gradient of sample r.
    let mut coef = Vec::with_capacity(b);
    for r in 0..b {
        let lp = log_pt[r];
        let pt = lp.exp();
        let q = T::one() - pt;
        if params.gamma == 0.0 {
            loss -= alphas[r] * lp;
            coef.push(alphas[r]);
        } else {
            let mod_f = q.powf(gamma);
            loss -= alphas[r] * mod_f * lp;
            // d/dz_k = α [(1−p)^γ − γ (1−p)^(γ−1) p log p] (p_k − δ_k)
            let extra = if q > T::zero() {
                gamma * q.powf(gamma - T::one()) * pt * lp
            } else {
                T::zero()
            };
            coef.push(alphas[r] * (mod_f - extra));
        }
    }
    let loss = loss * inv_b;
    let labels = labels.to_vec();
    Ok(logits.tape().push_op(
        Tensor::scalar(loss),
        &[logits],
        Box::new(move |g, _| {
            let gv = g.item();
            let mut dz = probs.clone();
            for (r, row) in dz.chunks_mut(l).enumerate() {
                for (k, v) in row.iter_mut().enumerate() {
                    let delta = if k == labels[r] { T::one() } else { T::zero() };
                    *v = (*v - delta) * coef[r] * inv_b * gv;
                }
            }
            vec![Some(Tensor::from_vec(&[b, l], dz))]
        }),
    ))
}

fn adjust<'t, T: Real>(logits: Var<'t, T>, priors: &ImbalancePriors) -> Result<Var<'t, T>> {
    let (_, l) = logits.value().dims2();
    if priors.pi.len() != l {
        return Err(Error::InvalidPrior(format!(
            "{} priors for {l} classes",
            priors.pi.len()
        )));
    }
    Ok(logits.add_row_offset(&priors.offsets::<T>()))
}

/// Cross-entropy of `softmax(logits + τ·log π)`.
pub fn logit_adjusted_ce<'t, T: Real>(
    logits: Var<'t, T>,
    labels: &[usize],
    priors: &ImbalancePriors,
) -> Result<Var<'t, T>> {
    check_logits(&logits.value(), labels)?;
    cross_entropy(adjust(logits, priors)?, labels)
}

/// Focal loss evaluated on prior-adjusted logits.
pub fn focal_logit_adjusted<'t, T: Real>(
    logits: Var<'t, T>,
    labels: &[usize],
    priors: &ImbalancePriors,
    params: &FocalParams,
) -> Result<Var<'t, T>> {
    check_logits(&logits.value(), labels)?;
    focal_loss(adjust(logits, priors)?, labels, params)
}
