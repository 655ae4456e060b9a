//! Datasets, long-tail construction, augmentation and loaders.

mod augment;
mod cifar;
mod directory;
mod long_tail;
mod synth;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::{Real, Tensor};

pub use augment::{make_twin_views, AugmentationPolicy, ColorJitter, CropPolicy, TwinBatch};
pub use cifar::{ingest_cifar10_binary, parse_cifar10_records, CIFAR10_RECORD_BYTES};
pub use directory::load_directory_dataset;
pub use long_tail::{
    beta_for_rho, build_long_tail, imbalance_factor, plan_for_rho, subsample_indices,
    subsample_to_plan, LongTailPlan, RHO_TOLERANCE,
};
pub use synth::{synth_dataset, synth_imbalanced_dataset, SynthSpec};

/// Labeled images, N×C×H×W with values in `[0, 1]`.
///
/// Reads of the label vector through [`Dataset::labels`] are counted so that
/// label-free code paths can be audited; clones and subsets share the counter.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    class_count: usize,
    label_reads: Arc<AtomicUsize>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Data(format!(
                "images must be N×C×H×W, got shape {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if class_count == 0 {
            return Err(Error::Data("class_count must be positive".into()));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= class_count) {
            return Err(Error::Data(format!(
                "sample {i} has label {y} but there are only {class_count} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
            label_reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// `(channels, height, width)` of every image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    /// Label vector. Every call is recorded in [`Dataset::label_reads`].
    pub fn labels(&self) -> &[usize] {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        &self.labels
    }

    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    /// Samples per class (reads labels).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in self.labels() {
            counts[y] += 1;
        }
        counts
    }

    /// New dataset holding `indices` in the given order; shares the
    /// label-read counter with `self`.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select0(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            label_reads: self.label_reads.clone(),
        }
    }

    /// Image batch converted to the training precision.
    pub fn image_batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let (c, h, w) = self.image_shape();
        let inner = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend(
                self.images.data()[i * inner..(i + 1) * inner]
                    .iter()
                    .map(|&v| T::from_f32(v)),
            );
        }
        Tensor::from_vec(&[indices.len(), c, h, w], data)
    }

    /// Bilinear resize (half-pixel centers) to `side × side`.
    pub fn resized(&self, side: usize) -> Dataset {
        let (c, h, w) = self.image_shape();
        if h == side && w == side {
            return self.clone();
        }
        let n = self.len();
        let mut out = Vec::with_capacity(n * c * side * side);
        let sy = h as f32 / side as f32;
        let sx = w as f32 / side as f32;
        let coord = |o: usize, scale: f32, extent: usize| {
            let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(extent - 1);
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, src - i0 as f32)
        };
        for plane in self.images.data().chunks(h * w) {
            for oy in 0..side {
                let (y0, y1, fy) = coord(oy, sy, h);
                for ox in 0..side {
                    let (x0, x1, fx) = coord(ox, sx, w);
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
                }
            }
        }
        Dataset {
            images: Tensor::from_vec(&[n, c, side, side], out),
            labels: self.labels.clone(),
            class_count: self.class_count,
            label_reads: self.label_reads.clone(),
        }
    }

    /// Adapts the channel count: grayscale is replicated to RGB, RGB is
    /// averaged to grayscale.
    pub fn with_channels(&self, channels: usize) -> Result<Dataset> {
        let (c, h, w) = self.image_shape();
        if c == channels {
            return Ok(self.clone());
        }
        let plane = h * w;
        let n = self.len();
        let mut out = Vec::with_capacity(n * channels * plane);
        for img in self.images.data().chunks(c * plane) {
            match (c, channels) {
                (1, k) => {
                    for _ in 0..k {
                        out.extend_from_slice(img);
                    }
                }
                (k, 1) => {
                    for p in 0..plane {
                        out.push((0..k).map(|ch| img[ch * plane + p]).sum::<f32>() / k as f32);
                    }
                }
                _ => {
                    return Err(Error::Data(format!(
                        "cannot convert {c}-channel images to {channels} channels"
                    )))
                }
            }
        }
        Ok(Dataset {
            images: Tensor::from_vec(&[n, channels, h, w], out),
            labels: self.labels.clone(),
            class_count: self.class_count,
            label_reads: self.label_reads.clone(),
        })
    }
}

/// Mini-batches of one epoch: a seeded permutation of `0..n` cut into
/// `⌊n / batch_size⌋` full batches. A pure function of its arguments.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "batch_order", &[epoch as u64]));
    order
        .chunks_exact(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let images = Tensor::from_vec(&[3, 1, 2, 2], (0..12).map(|v| v as f32 / 12.0).collect());
        Dataset::new(images, vec![0, 1, 1], 2).unwrap()
    }

    #[test]
    fn invariants_are_checked() {
        let images = Tensor::<f32>::zeros(&[2, 1, 2, 2]);
        assert!(Dataset::new(images.clone(), vec![0], 2).is_err());
        assert!(Dataset::new(images.clone(), vec![0, 2], 2).is_err());
        assert!(Dataset::new(images, vec![0, 1], 2).is_ok());
    }

    #[test]
    fn label_reads_are_counted_across_subsets() {
        let ds = tiny();
        let _ = ds.images();
        let sub = ds.subset(&[2, 0]);
        assert_eq!(ds.label_reads(), 0);
        assert_eq!(sub.labels(), &[1, 0]);
        assert_eq!(ds.label_reads(), 1);
    }

    #[test]
    fn resize_identity_and_constant_planes() {
        let ds = tiny();
        assert_eq!(ds.resized(2).images(), ds.images());
        let flat = Dataset::new(Tensor::full(&[1, 1, 4, 4], 0.25f32), vec![0], 1).unwrap();
        let r = flat.resized(7);
        assert_eq!(r.image_shape(), (1, 7, 7));
        assert!(r.images().data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn channel_adaptation() {
        let ds = tiny();
        let rgb = ds.with_channels(3).unwrap();
        assert_eq!(rgb.image_shape(), (3, 2, 2));
        let back = rgb.with_channels(1).unwrap();
        assert!(back.images().max_abs_diff(ds.images()) < 1e-6);
    }

    #[test]
    fn epoch_batches_are_deterministic_and_disjoint() {
        let a = epoch_batches(10, 3, 5, 2);
        assert_eq!(a, epoch_batches(10, 3, 5, 2));
        assert_ne!(a, epoch_batches(10, 3, 5, 3));
        assert_eq!(a.len(), 3);
        let mut all: Vec<usize> = a.concat();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 9);
    }
}
