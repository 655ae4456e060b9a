//! Procedural, linearly separable image classes for desk-scale runs.
//!
//! Class `c` of `L` has a fixed base color (hue `c/L`) modulated by
//! horizontal stripes whose frequency cycles with `c`; samples draw a random
//! stripe phase, a small brightness offset and pixel noise. Horizontal
//! stripes survive horizontal flips, so augmentations keep classes apart.

use std::f32::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{plan_for_rho, Dataset};
use crate::error::Result;
use crate::seed::rng_for;
use crate::tensor::Tensor;

const NOISE_STD: f32 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Samples per class, class order preserved.
    pub counts: Vec<usize>,
    pub side: usize,
    pub channels: usize,
    pub seed: u64,
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn class_colors(class: usize, classes: usize, channels: usize) -> Vec<f32> {
    let rgb = hsv_to_rgb(class as f32 / classes as f32, 0.7, 0.85);
    match channels {
        3 => rgb.to_vec(),
        // Gray classes are told apart by brightness level instead of hue.
        _ => vec![0.2 + 0.6 * class as f32 / (classes.max(2) - 1) as f32; channels],
    }
}

pub fn synth_dataset(spec: &SynthSpec) -> Dataset {
    let classes = spec.counts.len();
    let (c, s) = (spec.channels, spec.side);
    let n: usize = spec.counts.iter().sum();
    let noise = Normal::new(0.0f32, NOISE_STD).expect("valid normal");
    let mut pixels = Vec::with_capacity(n * c * s * s);
    let mut labels = Vec::with_capacity(n);
    for (class, &count) in spec.counts.iter().enumerate() {
        let base = class_colors(class, classes, c);
        let freq = 1.0 + (class % 3) as f32;
        for i in 0..count {
            let mut rng = rng_for(spec.seed, "synth", &[class as u64, i as u64]);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let shift = rng.gen_range(-0.05f32..0.05);
            for level in &base {
                for y in 0..s {
                    let stripe = 0.75 + 0.25 * (2.0 * PI * freq * y as f32 / s as f32 + phase).sin();
                    for _ in 0..s {
                        let v = level * stripe + shift + noise.sample(&mut rng);
                        pixels.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(class);
        }
    }
    Dataset::new(Tensor::from_vec(&[n, c, s, s], pixels), labels, classes)
        .expect("generated labels are in range")
}

/// RGB synthetic set with long-tail class sizes for imbalance `rho`.
pub fn synth_imbalanced_dataset(
    class_count: usize,
    per_class: usize,
    side: usize,
    rho: f64,
    seed: u64,
) -> Result<Dataset> {
    if class_count < 2 {
        return Err(crate::Error::Parameter(format!(
            "need at least 2 classes, got {class_count}"
        )));
    }
    if side < 8 {
        return Err(crate::Error::Parameter(format!("image side must be >= 8, got {side}")));
    }
    let plan = plan_for_rho(&vec![per_class; class_count], rho)?;
    Ok(synth_dataset(&SynthSpec {
        counts: plan.lt_counts,
        side,
        channels: 3,
        seed,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_when_rho_is_one() {
        let ds = synth_imbalanced_dataset(4, 20, 8, 1.0, 0).unwrap();
        assert_eq!(ds.class_counts(), vec![20; 4]);
    }

    #[test]
    fn rho_ten_counts() {
        let ds = synth_imbalanced_dataset(10, 500, 8, 10.0, 0).unwrap();
        let counts = ds.class_counts();
        assert_eq!(*counts.iter().min().unwrap(), 38);
        assert_eq!(*counts.iter().max().unwrap(), 387);
        assert_eq!(counts[0], 387);
        assert_eq!(counts[9], 38);
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_imbalanced_dataset(3, 10, 8, 2.0, 5).unwrap();
        let b = synth_imbalanced_dataset(3, 10, 8, 2.0, 5).unwrap();
        let c = synth_imbalanced_dataset(3, 10, 8, 2.0, 6).unwrap();
        assert_eq!(a.images().checksum(), b.images().checksum());
        assert_ne!(a.images().checksum(), c.images().checksum());
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_parameters_and_unsatisfiable_imbalance() {
        assert!(synth_imbalanced_dataset(1, 10, 8, 1.0, 0).is_err());
        assert!(synth_imbalanced_dataset(2, 10, 4, 1.0, 0).is_err());
        assert!(matches!(
            synth_imbalanced_dataset(10, 10, 8, 1e9, 0),
            Err(crate::Error::UnsatisfiableImbalance { .. })
        ));
    }

    /// Nearest-class-mean on the raw pixels separates the classes, so the
    /// set is learnable by small models.
    #[test]
    fn class_means_separate_samples() {
        let ds = synth_imbalanced_dataset(10, 30, 8, 1.0, 3).unwrap();
        let inner = 3 * 64;
        let labels = ds.labels().to_vec();
        let mut means = vec![vec![0f32; inner]; 10];
        for (i, &y) in labels.iter().enumerate() {
            for (m, &v) in means[y].iter_mut().zip(&ds.images().data()[i * inner..(i + 1) * inner]) {
                *m += v / 30.0;
            }
        }
        let channel_mean = |v: &[f32]| -> Vec<f32> {
            v.chunks(64).map(|p| p.iter().sum::<f32>() / 64.0).collect()
        };
        let centers: Vec<Vec<f32>> = means.iter().map(|m| channel_mean(m)).collect();
        let mut correct = 0;
        for (i, &y) in labels.iter().enumerate() {
            let f = channel_mean(&ds.images().data()[i * inner..(i + 1) * inner]);
            let pred = (0..10)
                .min_by(|&a, &b| {
                    let da: f32 = f.iter().zip(&centers[a]).map(|(x, c)| (x - c).powi(2)).sum();
                    let db: f32 = f.iter().zip(&centers[b]).map(|(x, c)| (x - c).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            correct += (pred == y) as usize;
        }
        assert!(correct as f64 / labels.len() as f64 > 0.95, "{correct}");
    }
}
