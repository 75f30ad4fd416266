//! Differentiable operations on [`Var`].

use std::sync::Arc;

use super::conv::{conv2d_backward, conv2d_forward};
use super::spatial::SpatialMap;
use super::tape::Var;
use super::tensor::{gemm, Real, Tensor};

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'t, T: Real> Var<'t, T> {
    fn unary(
        self,
        value: Tensor<T>,
        grad: impl Fn(&Tensor<T>) -> Tensor<T> + 'static,
    ) -> Var<'t, T> {
        self.tape.op(value, &[self], move |g, _| vec![Some(grad(g))])
    }

    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.tape
            .op(v, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.tape
            .op(v, &[self, other], |g, _| vec![Some(g.clone()), Some(g.scale(-T::one()))])
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        let v = a.zip_map(&b, |x, y| x * y);
        self.tape.op(v, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |u, y| u * y)),
                need[1].then(|| g.zip_map(&a, |u, x| u * x)),
            ]
        })
    }

    pub fn add_scalar(self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        let v = self.value().map(|x| x + s);
        self.unary(v, |g| g.clone())
    }

    pub fn mul_scalar(self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        let v = self.value().scale(s);
        self.unary(v, move |g| g.scale(s))
    }

    pub fn sqr(self) -> Var<'t, T> {
        let x = self.value();
        let v = x.map(|a| a * a);
        self.unary(v, move |g| g.zip_map(&x, |u, a| T::of(2.0) * u * a))
    }

    pub fn silu(self) -> Var<'t, T> {
        let x = self.value();
        let v = x.map(|a| a * sigmoid(a));
        self.unary(v, move |g| {
            g.zip_map(&x, |u, a| {
                let s = sigmoid(a);
                u * (s + a * s * (T::one() - s))
            })
        })
    }

    pub fn tanh(self) -> Var<'t, T> {
        let y = Arc::new(self.value().map(|a| a.tanh()));
        let yc = y.clone();
        self.unary((*y).clone(), move |g| g.zip_map(&yc, |u, t| u * (T::one() - t * t)))
    }

    /// Clamp with the gradient passed through only where the input was inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, T> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let x = self.value();
        let v = x.map(|a| a.max(lo).min(hi));
        self.unary(v, move |g| {
            g.zip_map(&x, |u, a| if a >= lo && a <= hi { u } else { T::zero() })
        })
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum()), move |g| {
            Tensor::full(&shape, g.data()[0])
        })
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = self.value().numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let orig = self.shape();
        let v = (*self.value()).clone().reshape(shape);
        self.unary(v, move |g| g.clone().reshape(&orig))
    }

    /// Forward value replaced by `value`; gradient flows as identity.
    pub fn straight_through(self, value: Tensor<T>) -> Var<'t, T> {
        assert_eq!(value.shape(), &self.shape()[..], "straight-through shape mismatch");
        self.unary(value, |g| g.clone())
    }

    pub fn conv2d(
        self,
        w: Var<'t, T>,
        b: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Var<'t, T> {
        let x = self.value();
        let wv = w.value();
        let bv = b.map(|b| b.value());
        let (y, geom) = conv2d_forward(&x, &wv, bv.as_deref(), stride, pad);
        let mut parents = vec![self, w];
        parents.extend(b);
        let has_bias = b.is_some();
        self.tape.op(y, &parents, move |g, need| {
            let want = [need[0], need[1], has_bias && need[2]];
            let (dx, dw, db) = conv2d_backward(&x, &wv, &geom, g, want);
            let mut out = vec![dx, dw];
            if has_bias {
                out.push(db);
            }
            out
        })
    }

    /// `x (n×in) · wᵀ + b`, with `w` stored `out×in`.
    pub fn linear(self, w: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let wv = w.value();
        let (n, din) = x.dims2();
        let (dout, win) = wv.dims2();
        assert_eq!(din, win, "linear: input width {din}, weight expects {win}");
        let bv = b.value();
        let mut y = Vec::with_capacity(n * dout);
        for _ in 0..n {
            y.extend_from_slice(bv.data());
        }
        gemm(n, din, dout, x.data(), false, wv.data(), true, T::one(), &mut y);
        self.tape.op(
            Tensor::from_vec(&[n, dout], y),
            &[self, w, b],
            move |g, need| {
                let dx = need[0].then(|| {
                    let mut d = vec![T::zero(); n * din];
                    gemm(n, dout, din, g.data(), false, wv.data(), false, T::zero(), &mut d);
                    Tensor::from_vec(&[n, din], d)
                });
                let dw = need[1].then(|| {
                    let mut d = vec![T::zero(); dout * din];
                    gemm(dout, n, din, g.data(), true, x.data(), false, T::zero(), &mut d);
                    Tensor::from_vec(&[dout, din], d)
                });
                let db = need[2].then(|| {
                    let mut d = vec![T::zero(); dout];
                    for row in g.data().chunks(dout) {
                        for (a, &v) in d.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_vec(&[dout], d)
                });
                vec![dx, dw, db]
            },
        )
    }

    pub fn upsample2x(self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let mut y = vec![T::zero(); n * c * 4 * h * w];
        for (src, dst) in x.data().chunks(h * w).zip(y.chunks_mut(4 * h * w)) {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
                }
            }
        }
        self.unary(Tensor::from_vec(&[n, c, 2 * h, 2 * w], y), move |g| {
            let mut d = vec![T::zero(); n * c * h * w];
            for (src, dst) in g.data().chunks(4 * h * w).zip(d.chunks_mut(h * w)) {
                for yy in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
                    }
                }
            }
            Tensor::from_vec(&[n, c, h, w], d)
        })
    }

    pub fn spatial(self, map: &Arc<SpatialMap>) -> Var<'t, T> {
        let y = map.apply(&self.value());
        let m = map.clone();
        self.unary(y, move |g| m.apply_transpose(g))
    }

    /// `(n, c, h, w) → (n, c)` spatial mean.
    pub fn global_avg_pool(self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let inv = T::of(1.0 / hw as f64);
        let y: Vec<T> = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.unary(Tensor::from_vec(&[n, c], y), move |g| {
            let mut d = Vec::with_capacity(n * c * hw);
            for &v in g.data() {
                d.extend(std::iter::repeat_n(v * inv, hw));
            }
            Tensor::from_vec(&[n, c, h, w], d)
        })
    }

    /// Unit-normalize the channel vector at every pixel: `x / (‖x‖₂ + eps)`.
    pub fn channel_unit_norm(self, eps: f64) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let eps = T::of(eps);
        let mut norms = vec![T::zero(); n * hw];
        for i in 0..n {
            for ch in 0..c {
                let p = &x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                for (acc, &v) in norms[i * hw..(i + 1) * hw].iter_mut().zip(p) {
                    *acc += v * v;
                }
            }
        }
        for v in norms.iter_mut() {
            *v = v.sqrt();
        }
        let mut y = x.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for p in 0..hw {
                    y[off + p] = y[off + p] / (norms[i * hw + p] + eps);
                }
            }
        }
        self.unary(Tensor::from_vec(&[n, c, h, w], y), move |g| {
            // d/dx (x/(r+e)) = g/(r+e) - x (x·g) / (r (r+e)^2)
            let mut d = vec![T::zero(); n * c * hw];
            for i in 0..n {
                for p in 0..hw {
                    let r = norms[i * hw + p];
                    let den = r + eps;
                    let mut xg = T::zero();
                    for ch in 0..c {
                        let o = (i * c + ch) * hw + p;
                        xg += x.data()[o] * g.data()[o];
                    }
                    let corr = if r > T::zero() {
                        xg / (r * den * den)
                    } else {
                        T::zero()
                    };
                    for ch in 0..c {
                        let o = (i * c + ch) * hw + p;
                        d[o] = g.data()[o] / den - x.data()[o] * corr;
                    }
                }
            }
            Tensor::from_vec(&[n, c, h, w], d)
        })
    }

    /// Mean binary cross-entropy between logits and constant 0/1 targets.
    pub fn bce_with_logits(self, targets: &Tensor<T>) -> Var<'t, T> {
        let z = self.value();
        assert_eq!(z.shape(), targets.shape(), "bce: logits/targets shape mismatch");
        let cnt = T::of(z.numel() as f64);
        let loss = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln())
            .sum::<T>()
            / cnt;
        let t = targets.clone();
        self.unary(Tensor::scalar(loss), move |g| {
            let s = g.data()[0] / cnt;
            z.zip_map(&t, |x, y| (sigmoid(x) - y) * s)
        })
    }

    /// Per-sample affine blend toward a per-sample gray level:
    /// `y = f·x + (1−f)·mean_gray(x)`, the gray mean taken with luma weights.
    pub fn contrast_blend(self, factor: f64) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, 3, "contrast needs RGB input");
        let hw = h * w;
        let luma = [0.299, 0.587, 0.114].map(T::of);
        let f = T::of(factor);
        let inv = T::of(1.0 / hw as f64);
        let mut y = x.data().to_vec();
        for i in 0..n {
            let mut m = T::zero();
            for ch in 0..3 {
                let o = (i * 3 + ch) * hw;
                m += luma[ch] * x.data()[o..o + hw].iter().copied().sum::<T>();
            }
            m = m * inv;
            for v in y[i * 3 * hw..(i + 1) * 3 * hw].iter_mut() {
                *v = f * *v + (T::one() - f) * m;
            }
        }
        self.unary(Tensor::from_vec(&[n, c, h, w], y), move |g| {
            let mut d = g.scale(f);
            for i in 0..n {
                let s: T = g.data()[i * 3 * hw..(i + 1) * 3 * hw].iter().copied().sum();
                let k = (T::one() - f) * s * inv;
                for ch in 0..3 {
                    let o = (i * 3 + ch) * hw;
                    for v in d.data_mut()[o..o + hw].iter_mut() {
                        *v += k * luma[ch];
                    }
                }
            }
            d
        })
    }
}
