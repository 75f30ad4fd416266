//! Sparse linear maps between image planes.
//!
//! Tiling, cropping, bilinear resampling, rotation and separable blurs are all
//! the same primitive: each output pixel is a short weighted sum of input
//! pixels. The map is shared by every channel of every batch item.

use super::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct SpatialMap {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// CSR row offsets, length `out_h * out_w + 1`.
    offsets: Vec<u32>,
    index: Vec<u32>,
    weight: Vec<f64>,
}

impl SpatialMap {
    fn builder(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            offsets: vec![0],
            index: Vec::new(),
            weight: Vec::new(),
        }
    }

    fn push(&mut self, idx: usize, w: f64) {
        if w != 0.0 {
            self.index.push(idx as u32);
            self.weight.push(w);
        }
    }

    fn end_row(&mut self) {
        self.offsets.push(self.index.len() as u32);
    }

    /// `out[y, x] = in[y mod h, x mod w]`.
    pub fn tile(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let mut m = Self::builder(in_h, in_w, out_h, out_w);
        for y in 0..out_h {
            for x in 0..out_w {
                m.push((y % in_h) * in_w + x % in_w, 1.0);
                m.end_row();
            }
        }
        m
    }

    /// Generic inverse-mapped bilinear sampling: `f(y, x)` gives the source
    /// coordinate (in pixel-center units) of output pixel `(y, x)`. Samples
    /// falling outside the source contribute zero.
    pub fn bilinear_with(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        f: impl Fn(usize, usize) -> (f64, f64),
    ) -> Self {
        let mut m = Self::builder(in_h, in_w, out_h, out_w);
        for y in 0..out_h {
            for x in 0..out_w {
                let (sy, sx) = f(y, x);
                let y0 = sy.floor();
                let x0 = sx.floor();
                let fy = sy - y0;
                let fx = sx - x0;
                for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                        let yy = y0 as isize + dy;
                        let xx = x0 as isize + dx;
                        if yy < 0 || xx < 0 || yy >= in_h as isize || xx >= in_w as isize {
                            continue;
                        }
                        m.push(yy as usize * in_w + xx as usize, wy * wx);
                    }
                }
                m.end_row();
            }
        }
        m
    }

    /// Bilinear resize of the window `[top, top+h) × [left, left+w)` (in source
    /// pixels, fractional allowed) to `out_h × out_w`. Samples are clamped to
    /// the window, so no content outside it leaks in.
    pub fn crop_resize(
        in_h: usize,
        in_w: usize,
        top: f64,
        left: f64,
        h: f64,
        w: f64,
        out_h: usize,
        out_w: usize,
    ) -> Self {
        let sy = h / out_h as f64;
        let sx = w / out_w as f64;
        let (y_lo, x_lo) = (top.max(0.0), left.max(0.0));
        let y_hi = (top + h - 1.0).min((in_h - 1) as f64).max(y_lo);
        let x_hi = (left + w - 1.0).min((in_w - 1) as f64).max(x_lo);
        Self::bilinear_with(in_h, in_w, out_h, out_w, |y, x| {
            (
                (top + (y as f64 + 0.5) * sy - 0.5).clamp(y_lo, y_hi),
                (left + (x as f64 + 0.5) * sx - 0.5).clamp(x_lo, x_hi),
            )
        })
    }

    pub fn resize(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self::crop_resize(in_h, in_w, 0.0, 0.0, in_h as f64, in_w as f64, out_h, out_w)
    }

    /// Rotation about the image center by `degrees` (counter-clockwise),
    /// exposed corners filled with zero.
    pub fn rotate(h: usize, w: usize, degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        Self::bilinear_with(h, w, h, w, |y, x| {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            // inverse rotation of the output coordinate
            (cy + s * dx + c * dy, cx + c * dx - s * dy)
        })
    }

    /// 1-D convolution along rows (`horizontal`) or columns with clamp-to-edge.
    pub fn convolve_1d(h: usize, w: usize, kernel: &[f64], horizontal: bool) -> Self {
        let r = (kernel.len() / 2) as isize;
        let mut m = Self::builder(h, w, h, w);
        for y in 0..h {
            for x in 0..w {
                // taps hitting the same clamped pixel are merged
                let mut taps: Vec<(usize, f64)> = Vec::with_capacity(kernel.len());
                for (t, &kv) in kernel.iter().enumerate() {
                    let o = t as isize - r;
                    let (yy, xx) = if horizontal {
                        (y as isize, (x as isize + o).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + o).clamp(0, h as isize - 1), x as isize)
                    };
                    let idx = yy as usize * w + xx as usize;
                    match taps.iter_mut().find(|(i, _)| *i == idx) {
                        Some(tap) => tap.1 += kv,
                        None => taps.push((idx, kv)),
                    }
                }
                for (i, wv) in taps {
                    m.push(i, wv);
                }
                m.end_row();
            }
        }
        m
    }

    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(
            (h, w),
            (self.in_h, self.in_w),
            "spatial map expects {}x{} input",
            self.in_h,
            self.in_w
        );
        let in_sz = h * w;
        let out_sz = self.out_h * self.out_w;
        let weights: Vec<T> = self.weight.iter().map(|&v| T::of(v)).collect();
        let mut out = vec![T::zero(); n * c * out_sz];
        for (src, dst) in x.data().chunks(in_sz).zip(out.chunks_mut(out_sz)) {
            for (p, d) in dst.iter_mut().enumerate() {
                let (a, b) = (self.offsets[p] as usize, self.offsets[p + 1] as usize);
                let mut acc = T::zero();
                for j in a..b {
                    acc += weights[j] * src[self.index[j] as usize];
                }
                *d = acc;
            }
        }
        Tensor::from_vec(&[n, c, self.out_h, self.out_w], out)
    }

    /// Transpose application (the backward pass of [`apply`](Self::apply)).
    pub fn apply_transpose<T: Real>(&self, dy: &Tensor<T>) -> Tensor<T> {
        let (n, c, _, _) = dy.dims4();
        let in_sz = self.in_h * self.in_w;
        let out_sz = self.out_h * self.out_w;
        let weights: Vec<T> = self.weight.iter().map(|&v| T::of(v)).collect();
        let mut dx = vec![T::zero(); n * c * in_sz];
        for (g, d) in dy.data().chunks(out_sz).zip(dx.chunks_mut(in_sz)) {
            for (p, &gv) in g.iter().enumerate() {
                let (a, b) = (self.offsets[p] as usize, self.offsets[p + 1] as usize);
                for j in a..b {
                    d[self.index[j] as usize] += weights[j] * gv;
                }
            }
        }
        Tensor::from_vec(&[n, c, self.in_h, self.in_w], dx)
    }
}
