//! Batch normalization and column standardization.

use super::Var;
use crate::tensor::{Real, Tensor};

/// Per-channel statistics measured by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Elements reduced per channel.
    pub count: usize,
}

/// Shared backward of `y = (x - mean) / sqrt(var + eps)` over groups of `m`
/// values, given `dxhat` and the normalized `xhat`.
fn normalize_backward<T: Real>(dxhat: &[T], xhat: &[T], inv_std: T, m: usize, out: &mut [T]) {
    let mt = T::lit(m as f64);
    let sum_d: T = dxhat.iter().copied().sum();
    let sum_dx: T = dxhat.iter().zip(xhat).map(|(&a, &b)| a * b).sum();
    for ((o, &d), &xh) in out.iter_mut().zip(dxhat).zip(xhat) {
        *o = inv_std / mt * (mt * d - sum_d - xh * sum_dx);
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Training-mode batch norm over N, H, W of an NCHW tensor.
    pub fn batch_norm_train(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        eps: T,
    ) -> (Var<'t, T>, BatchStats<T>) {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let m = n * plane;
        let gv = gamma.value();
        let bv = beta.value();
        let xd = x.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
            let mu = s / T::lit(m as f64);
            let mut v = T::zero();
            for b in 0..n {
                for &xv in &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                    v += (xv - mu) * (xv - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = v / T::lit(m as f64);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut out = vec![T::zero(); x.numel()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for i in r {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv.data()[ch] * xh + bv.data()[ch];
                }
            }
        }
        let out = Tensor::from_vec(x.shape(), out);
        let stats = BatchStats {
            mean,
            var,
            count: m,
        };
        let shape = x.shape().to_vec();
        let y = self.tape().push_op(
            out,
            &[self, gamma, beta],
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = needs[0].then(|| vec![T::zero(); n * c * plane]);
                let mut dxhat = vec![T::zero(); m];
                let mut xh = vec![T::zero(); m];
                for ch in 0..c {
                    for b in 0..n {
                        let src = (b * c + ch) * plane;
                        for i in 0..plane {
                            let gval = gd[src + i];
                            dgamma[ch] += gval * xhat[src + i];
                            dbeta[ch] += gval;
                            dxhat[b * plane + i] = gval * gv.data()[ch];
                            xh[b * plane + i] = xhat[src + i];
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut tmp = vec![T::zero(); m];
                        normalize_backward(&dxhat, &xh, inv_std[ch], m, &mut tmp);
                        for b in 0..n {
                            let dst = (b * c + ch) * plane;
                            dx[dst..dst + plane].copy_from_slice(&tmp[b * plane..(b + 1) * plane]);
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::from_vec(&shape, d)),
                    needs[1].then(|| Tensor::from_vec(&[c], dgamma)),
                    needs[2].then(|| Tensor::from_vec(&[c], dbeta)),
                ]
            }),
        );
        (y, stats)
    }

    /// Evaluation-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let gv = gamma.value();
        let bv = beta.value();
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let mean = running_mean.to_vec();
        let mut out = x.as_ref().clone();
        for b in 0..n {
            for ch in 0..c {
                let scale = gv.data()[ch] * inv_std[ch];
                let shift = bv.data()[ch];
                for v in &mut out.data_mut()[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                    *v = (*v - mean[ch]) * scale + shift;
                }
            }
        }
        let shape = x.shape().to_vec();
        self.tape().push_op(
            out,
            &[self, gamma, beta],
            Box::new(move |g, needs| {
                let gd = g.data();
                let xd = x.data();
                let mut dx = needs[0].then(|| Tensor::zeros(&shape));
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                        for i in r {
                            let xh = (xd[i] - mean[ch]) * inv_std[ch];
                            dgamma[ch] += gd[i] * xh;
                            dbeta[ch] += gd[i];
                            if let Some(dx) = dx.as_mut() {
                                dx.data_mut()[i] = gd[i] * gv.data()[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                vec![
                    dx,
                    needs[1].then(|| Tensor::from_vec(&[c], dgamma)),
                    needs[2].then(|| Tensor::from_vec(&[c], dbeta)),
                ]
            }),
        )
    }

    /// Column-wise standardization of a B×D matrix: subtract the batch mean
    /// and divide by `sqrt(biased variance + eps)`.
    pub fn standardize_cols(self, eps: T) -> Var<'t, T> {
        let x = self.value();
        let (rows, cols) = x.dims2();
        let xd = x.data();
        let mut xhat = vec![T::zero(); rows * cols];
        let mut inv_std = vec![T::zero(); cols];
        for j in 0..cols {
            let mu = (0..rows).map(|r| xd[r * cols + j]).sum::<T>() / T::lit(rows as f64);
            let var = (0..rows)
                .map(|r| (xd[r * cols + j] - mu) * (xd[r * cols + j] - mu))
                .sum::<T>()
                / T::lit(rows as f64);
            inv_std[j] = T::one() / (var + eps).sqrt();
            for r in 0..rows {
                xhat[r * cols + j] = (xd[r * cols + j] - mu) * inv_std[j];
            }
        }
        let out = Tensor::from_vec(&[rows, cols], xhat.clone());
        self.unary(out, move |g| {
            let mut dx = vec![T::zero(); rows * cols];
            let mut col_g = vec![T::zero(); rows];
            let mut col_x = vec![T::zero(); rows];
            let mut tmp = vec![T::zero(); rows];
            for j in 0..cols {
                for r in 0..rows {
                    col_g[r] = g.data()[r * cols + j];
                    col_x[r] = xhat[r * cols + j];
                }
                normalize_backward(&col_g, &col_x, inv_std[j], rows, &mut tmp);
                for r in 0..rows {
                    dx[r * cols + j] = tmp[r];
                }
            }
            Tensor::from_vec(&[rows, cols], dx)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::check;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn batch_norm_gradients() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[3, 2, 2, 3]);
            let g = rand_tensor(&mut rng, &[2]);
            let b = rand_tensor(&mut rng, &[2]);
            let t = rand_tensor(&mut rng, &[3, 2, 2, 3]);
            let err = check(&[x.clone(), g.clone(), b.clone(), t.clone()], &|_, v| {
                v[0].batch_norm_train(v[1], v[2], 1e-5).0.mul(v[3]).sum()
            });
            assert!(err < 1e-4, "train seed {seed}: {err}");
            let err = check(&[x, g, b, t], &|_, v| {
                v[0].batch_norm_eval(v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)
                    .mul(v[3])
                    .sum()
            });
            assert!(err < 1e-4, "eval seed {seed}: {err}");
        }
    }

    #[test]
    fn standardize_gradients_and_moments() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(30 + seed);
            let x = rand_tensor(&mut rng, &[5, 3]);
            let t = rand_tensor(&mut rng, &[5, 3]);
            let err = check(&[x.clone(), t], &|_, v| v[0].standardize_cols(1e-5).mul(v[1]).sum());
            assert!(err < 1e-4, "seed {seed}: {err}");
            let tape = crate::autodiff::Tape::new();
            let z = tape.constant(x).standardize_cols(0.0).value();
            for j in 0..3 {
                let col: Vec<f64> = (0..5).map(|r| z.data()[r * 3 + j]).collect();
                let mean = col.iter().sum::<f64>() / 5.0;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
                assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
            }
        }
    }
}
