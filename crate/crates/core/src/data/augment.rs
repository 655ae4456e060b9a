//! Random crop, horizontal flip and color jitter; twin views for the
//! redundancy-reduction objective.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropPolicy {
    pub enabled: bool,
    /// Zero padding on each side before cropping back to the input size.
    pub padding: usize,
}

/// Per-channel jitter: `x' = clamp((x − μ_c)·contrast + μ_c + brightness)`
/// with both factors drawn uniformly from their intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: (f32, f32),
    pub contrast: (f32, f32),
}

impl Default for ColorJitter {
    fn default() -> Self {
        ColorJitter {
            brightness: (-0.2, 0.2),
            contrast: (0.8, 1.2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub crop: CropPolicy,
    pub horizontal_flip: f64,
    pub color_distortion: Option<ColorJitter>,
}

impl AugmentationPolicy {
    pub fn disabled() -> Self {
        AugmentationPolicy {
            crop: CropPolicy {
                enabled: false,
                padding: 0,
            },
            horizontal_flip: 0.0,
            color_distortion: None,
        }
    }

    /// Crop padding of 4 pixels at side 32, scaled with the image side.
    pub fn crop_padding_for(side: usize) -> usize {
        ((4 * side) as f64 / 32.0).round().max(1.0) as usize
    }

    /// Crop + flip, the light policy used for supervised fine-tuning.
    pub fn light(side: usize) -> Self {
        AugmentationPolicy {
            crop: CropPolicy {
                enabled: true,
                padding: Self::crop_padding_for(side),
            },
            horizontal_flip: 0.5,
            color_distortion: None,
        }
    }

    /// Crop + flip + color jitter, used for the twin views during search.
    pub fn twin(side: usize) -> Self {
        AugmentationPolicy {
            color_distortion: Some(ColorJitter::default()),
            ..Self::light(side)
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if !(0.0..=1.0).contains(&self.horizontal_flip) {
            return Err(crate::Error::Parameter(format!(
                "flip probability {} outside [0, 1]",
                self.horizontal_flip
            )));
        }
        if let Some(j) = &self.color_distortion {
            if j.brightness.0 > j.brightness.1 || j.contrast.0 > j.contrast.1 || j.contrast.0 < 0.0 {
                return Err(crate::Error::Parameter(format!("bad color jitter ranges {j:?}")));
            }
        }
        Ok(())
    }

    /// Applies one sampled transformation chain to a single C×H×W image.
    pub fn apply(&self, image: &[f32], c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let mut out = image.to_vec();
        if self.crop.enabled && self.crop.padding > 0 {
            let p = self.crop.padding;
            let dy = rng.gen_range(0..=2 * p) as isize - p as isize;
            let dx = rng.gen_range(0..=2 * p) as isize - p as isize;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as isize + dy;
                        let sx = x as isize + dx;
                        out[(ch * h + y) * w + x] =
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                0.0
                            } else {
                                image[(ch * h + sy as usize) * w + sx as usize]
                            };
                    }
                }
            }
        }
        if self.horizontal_flip > 0.0 && rng.gen_bool(self.horizontal_flip) {
            for row in out.chunks_mut(w) {
                row.reverse();
            }
        }
        if let Some(jitter) = &self.color_distortion {
            let plane = h * w;
            for ch in out.chunks_mut(plane) {
                let brightness = sample(rng, jitter.brightness);
                let contrast = sample(rng, jitter.contrast);
                let mean = ch.iter().sum::<f32>() / plane as f32;
                for v in ch.iter_mut() {
                    *v = ((*v - mean) * contrast + mean + brightness).clamp(0.0, 1.0);
                }
            }
        }
        out
    }

    /// Augments every image of a batch; image `i` uses a stream derived from
    /// `(seed, i)` so the result does not depend on the worker count.
    pub fn apply_batch(&self, images: &Tensor<f32>, seed: u64, stream: &str) -> Tensor<f32> {
        let (n, c, h, w) = images.dims4();
        let inner = c * h * w;
        let data: Vec<f32> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let mut rng = rng_for(seed, stream, &[i as u64]);
                self.apply(&images.data()[i * inner..(i + 1) * inner], c, h, w, &mut rng)
            })
            .collect();
        Tensor::from_vec(&[n, c, h, w], data)
    }
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Two independently augmented copies of one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TwinBatch {
    pub view_a: Tensor<f32>,
    pub view_b: Tensor<f32>,
    pub source_indices: Vec<usize>,
}

impl TwinBatch {
    pub fn with_source_indices(mut self, indices: Vec<usize>) -> Self {
        assert_eq!(indices.len(), self.view_a.shape()[0]);
        self.source_indices = indices;
        self
    }

    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }
}

pub fn make_twin_views(images: &Tensor<f32>, policy: &AugmentationPolicy, seed: u64) -> TwinBatch {
    let n = images.shape()[0];
    let seed = derive_seed(seed, "twin_views", &[]);
    TwinBatch {
        view_a: policy.apply_batch(images, seed, "view_a"),
        view_b: policy.apply_batch(images, seed, "view_b"),
        source_indices: (0..n).collect(),
    }
}
