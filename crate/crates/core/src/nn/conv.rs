//! 2-D convolution via im2col and GEMM, NCHW layout.

use super::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let n = oh * ow;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let n = oh * ow;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, ConvGeom) {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, kh, kw) = w.dims4();
    assert_eq!(cin, wcin, "conv2d: input has {cin} channels, kernel expects {wcin}");
    assert_eq!(kh, kw, "conv2d: only square kernels");
    let g = ConvGeom {
        cin,
        h,
        w: wd,
        cout,
        k: kh,
        stride,
        pad,
    };
    let (oh, ow) = g.out_hw();
    let npix = oh * ow;
    let rows = g.rows();
    let mut out = vec![T::zero(); n * cout * npix];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * npix]
    };
    let xin = x.data();
    for i in 0..n {
        let xi = &xin[i * cin * h * wd..(i + 1) * cin * h * wd];
        let oi = &mut out[i * cout * npix..(i + 1) * cout * npix];
        if let Some(b) = b {
            for (co, &bv) in b.data().iter().enumerate() {
                oi[co * npix..(co + 1) * npix].fill(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            gemm(cout, rows, npix, w.data(), false, xi, false, beta, oi);
        } else {
            im2col(xi, &g, &mut col);
            gemm(cout, rows, npix, w.data(), false, &col, false, beta, oi);
        }
    }
    (Tensor::from_vec(&[n, cout, oh, ow], out), g)
}

/// Returns `(dx, dw, db)`, each computed only when requested.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &ConvGeom,
    dy: &Tensor<T>,
    want: [bool; 3],
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let n = x.shape()[0];
    let (oh, ow) = g.out_hw();
    let npix = oh * ow;
    let rows = g.rows();
    let in_sz = g.cin * g.h * g.w;
    let mut dx = want[0].then(|| vec![T::zero(); n * in_sz]);
    let mut dw = want[1].then(|| vec![T::zero(); g.cout * rows]);
    let db = want[2].then(|| {
        let mut db = vec![T::zero(); g.cout];
        for i in 0..n {
            for (co, acc) in db.iter_mut().enumerate() {
                let off = (i * g.cout + co) * npix;
                *acc += dy.data()[off..off + npix].iter().copied().sum::<T>();
            }
        }
        Tensor::from_vec(&[g.cout], db)
    });
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * npix }];
    for i in 0..n {
        let dyi = &dy.data()[i * g.cout * npix..(i + 1) * g.cout * npix];
        if let Some(dw) = dw.as_mut() {
            let xi = &x.data()[i * in_sz..(i + 1) * in_sz];
            let colv: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, g, &mut col);
                &col
            };
            // dw += dy_i (cout×npix) · col_iᵀ (npix×rows)
            gemm(g.cout, npix, rows, dyi, false, colv, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * in_sz..(i + 1) * in_sz];
            if g.is_pointwise() {
                gemm(rows, g.cout, npix, w.data(), true, dyi, false, T::zero(), dxi);
            } else {
                // dcol = wᵀ (rows×cout) · dy_i (cout×npix)
                gemm(rows, g.cout, npix, w.data(), true, dyi, false, T::zero(), &mut col);
                col2im(&col, g, dxi);
            }
        }
    }
    (
        dx.map(|d| Tensor::from_vec(x.shape(), d)),
        dw.map(|d| Tensor::from_vec(w.shape(), d)),
        db,
    )
}
