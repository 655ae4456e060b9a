//! Convolution and pooling over NCHW tensors.

use serde::{Deserialize, Serialize};

use super::Var;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            dilation,
            groups,
        }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.padding - span) / self.stride + 1
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl Geometry {
    /// Valid output column range `[lo, hi)` for kernel column `kx`, i.e. the
    /// `ox` for which `ox*stride + kx*dilation - padding` lies in `[0, w)`.
    #[inline]
    fn col_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.spec.stride;
        let off = k * self.spec.dilation;
        let p = self.spec.padding;
        let lo = if off >= p { 0 } else { (p - off).div_ceil(s) };
        // need ox*s + off - p <= extent - 1
        let hi = if extent + p > off {
            ((extent - 1 + p - off) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Calls `f(out_index_base, in_index_base, weight_index, lo, hi)` for
    /// every (n, oc, ic, ky, kx, oy) combination with a nonempty column range;
    /// the contributing pairs are `out[base_o + ox]` and
    /// `in[base_i + ox*stride]` for `ox` in `[lo, hi)`.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let g = self.spec.groups;
        let cin_g = self.cin / g;
        let cout_g = self.cout / g;
        let s = self.spec.stride;
        let d = self.spec.dilation;
        let p = self.spec.padding;
        let ranges: Vec<(usize, usize)> = (0..self.kw)
            .map(|kx| self.col_range(kx, self.w, self.ow))
            .collect();
        let row_ranges: Vec<(usize, usize)> = (0..self.kh)
            .map(|ky| self.col_range(ky, self.h, self.oh))
            .collect();
        for b in 0..self.n {
            for oc in 0..self.cout {
                let grp = oc / cout_g;
                for icg in 0..cin_g {
                    let ic = grp * cin_g + icg;
                    let wbase = (oc * cin_g + icg) * self.kh * self.kw;
                    let ibase = (b * self.cin + ic) * self.h * self.w;
                    let obase = (b * self.cout + oc) * self.oh * self.ow;
                    for ky in 0..self.kh {
                        let (ylo, yhi) = row_ranges[ky];
                        for oy in ylo..yhi {
                            let iy = oy * s + ky * d - p;
                            for kx in 0..self.kw {
                                let (lo, hi) = ranges[kx];
                                if lo >= hi {
                                    continue;
                                }
                                // ix = ox*s + kx*d - p; fold the offset into the base.
                                let in_row = ibase + iy * self.w + kx * d;
                                f(obase + oy * self.ow, in_row, wbase + ky * self.kw + kx, lo, hi);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// 2-D cross-correlation without bias. `weight` is `O × I/groups × kh × kw`.
    pub fn conv2d(self, weight: Var<'t, T>, spec: ConvSpec) -> Var<'t, T> {
        let x = self.value();
        let w = weight.value();
        let (n, cin, h, wd) = x.dims4();
        let (cout, cin_g, kh, kw) = w.dims4();
        assert!(spec.groups >= 1 && cin % spec.groups == 0 && cout % spec.groups == 0);
        assert_eq!(cin_g, cin / spec.groups, "conv2d: weight expects {cin_g} input channels per group");
        let geo = Geometry {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            oh: spec.out_size(h, kh),
            ow: spec.out_size(wd, kw),
            spec,
        };
        let s = spec.stride;
        let p = spec.padding;
        let mut out = vec![T::zero(); n * cout * geo.oh * geo.ow];
        {
            let xd = x.data();
            let wdat = w.data();
            geo.for_each_row(|ob, ib, wi, lo, hi| {
                let wv = wdat[wi];
                for ox in lo..hi {
                    out[ob + ox] += wv * xd[ib + ox * s - p];
                }
            });
        }
        let out = Tensor::from_vec(&[n, cout, geo.oh, geo.ow], out);
        self.tape().push_op(
            out,
            &[self, weight],
            Box::new(move |g, needs| {
                let gd = g.data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); n * cin * h * wd];
                    let wdat = w.data();
                    geo.for_each_row(|ob, ib, wi, lo, hi| {
                        let wv = wdat[wi];
                        for ox in lo..hi {
                            dx[ib + ox * s - p] += wv * gd[ob + ox];
                        }
                    });
                    Tensor::from_vec(&[n, cin, h, wd], dx)
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![T::zero(); w.numel()];
                    let xd = x.data();
                    geo.for_each_row(|ob, ib, wi, lo, hi| {
                        let mut acc = T::zero();
                        for ox in lo..hi {
                            acc += gd[ob + ox] * xd[ib + ox * s - p];
                        }
                        dw[wi] += acc;
                    });
                    Tensor::from_vec(w.shape(), dw)
                });
                vec![dx, dw]
            }),
        )
    }

    /// `k×k` max pooling, stride 1, padding `k/2` (shape preserving).
    pub fn max_pool(self, k: usize) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let r = (k / 2) as isize;
        let mut out = vec![T::zero(); x.numel()];
        let mut arg = vec![0usize; x.numel()];
        let xd = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let mut best = T::neg_infinity();
                    let mut best_i = base + y * w + xx;
                    for dy in -r..=r {
                        let yy = y as isize + dy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in -r..=r {
                            let xq = xx as isize + dx;
                            if xq < 0 || xq >= w as isize {
                                continue;
                            }
                            let i = base + yy as usize * w + xq as usize;
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    out[base + y * w + xx] = best;
                    arg[base + y * w + xx] = best_i;
                }
            }
        }
        let shape = x.shape().to_vec();
        let out = Tensor::from_vec(&shape, out);
        self.unary(out, move |g| {
            let mut dx = Tensor::zeros(&shape);
            let dd = dx.data_mut();
            for (o, &src) in arg.iter().enumerate() {
                dd[src] += g.data()[o];
            }
            dx
        })
    }

    /// `k×k` average pooling, stride 1, padding `k/2`; padded cells are
    /// excluded from the divisor.
    pub fn avg_pool(self, k: usize) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let r = k / 2;
        let window = move |y: usize, xx: usize| {
            let y0 = y.saturating_sub(r);
            let y1 = (y + r + 1).min(h);
            let x0 = xx.saturating_sub(r);
            let x1 = (xx + r + 1).min(w);
            (y0, y1, x0, x1)
        };
        let mut out = vec![T::zero(); x.numel()];
        let xd = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let (y0, y1, x0, x1) = window(y, xx);
                    let mut acc = T::zero();
                    for yy in y0..y1 {
                        for xq in x0..x1 {
                            acc += xd[base + yy * w + xq];
                        }
                    }
                    out[base + y * w + xx] = acc / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let shape = x.shape().to_vec();
        let out = Tensor::from_vec(&shape, out);
        self.unary(out, move |g| {
            let mut dx = Tensor::zeros(&shape);
            let dd = dx.data_mut();
            let gd = g.data();
            for plane in 0..n * c {
                let base = plane * h * w;
                for y in 0..h {
                    for xx in 0..w {
                        let (y0, y1, x0, x1) = window(y, xx);
                        let share =
                            gd[base + y * w + xx] / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                        for yy in y0..y1 {
                            for xq in x0..x1 {
                                dd[base + yy * w + xq] += share;
                            }
                        }
                    }
                }
            }
            dx
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

    /// Direct textbook convolution used as the reference.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: ConvSpec) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4();
        let (cout, cin_g, kh, kw) = w.dims4();
        let oh = spec.out_size(h, kh);
        let ow = spec.out_size(wd, kw);
        let cout_g = cout / spec.groups;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for b in 0..n {
            for oc in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for icg in 0..cin_g {
                            let ic = (oc / cout_g) * cin_g + icg;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                        - spec.padding as isize;
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                        - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((oc * cin_g + icg) * kh + ky) * kw + kx]
                                        * x.data()[((b * cin + ic) * h + iy as usize) * wd
                                            + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((b * cout + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn specs() -> Vec<(ConvSpec, usize, usize, usize)> {
        // (spec, cin, cout, kernel)
        vec![
            (ConvSpec::new(1, 1, 1, 1), 3, 4, 3),
            (ConvSpec::new(1, 1, 1, 4), 4, 4, 3),
            (ConvSpec::new(1, 2, 1, 2), 2, 2, 5),
            (ConvSpec::new(1, 2, 2, 2), 2, 2, 3),
            (ConvSpec::new(1, 4, 2, 2), 2, 2, 5),
            (ConvSpec::new(2, 0, 1, 1), 3, 2, 1),
            (ConvSpec::new(2, 1, 1, 1), 2, 3, 3),
        ]
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (spec, cin, cout, k) in specs() {
            let x = rand_tensor(&mut rng, &[2, cin, 7, 6]);
            let w = rand_tensor(&mut rng, &[cout, cin / spec.groups, k, k]);
            let tape = crate::autodiff::Tape::new();
            let y = tape.constant(x.clone()).conv2d(tape.constant(w.clone()), spec);
            let reference = naive_conv(&x, &w, spec);
            assert_eq!(y.value().shape(), reference.shape());
            assert!(y.value().max_abs_diff(&reference) < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            for (spec, cin, cout, k) in specs() {
                let x = rand_tensor(&mut rng, &[2, cin, 5, 4]);
                let w = rand_tensor(&mut rng, &[cout, cin / spec.groups, k, k]);
                let err = check(&[x, w], &|_, v| v[0].conv2d(v[1], spec).square().sum());
                assert!(err < 1e-4, "seed {seed} {spec:?}: {err}");
            }
        }
    }

    #[test]
    fn pool_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
            let x = rand_tensor(&mut rng, &[2, 2, 4, 5]);
            let err = check(&[x], &|_, v| {
                v[0].max_pool(3).square().sum().add(v[0].avg_pool(3).square().sum())
            });
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn avg_pool_excludes_padding() {
        let tape = crate::autodiff::Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = x.avg_pool(3);
        assert!(y.value().data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }
}
