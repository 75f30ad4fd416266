//! Image-quality and extraction metrics.

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::message::BitMessage;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn to_255(v: f32) -> f64 {
    (v as f64 + 1.0) * 127.5
}

fn check_same(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if a.values().shape() != b.values().shape() {
        return Err(Error::shape(format!(
            "images differ in shape: {:?} vs {:?}",
            a.values().shape(),
            b.values().shape()
        )));
    }
    Ok(())
}

/// Mean squared error on the `[0, 255]` rescaling.
pub fn mse_255(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_same(a, b)?;
    let (da, db) = (a.values().data(), b.values().data());
    Ok(da
        .iter()
        .zip(db)
        .map(|(&x, &y)| (to_255(x) - to_255(y)).powi(2))
        .sum::<f64>()
        / da.len() as f64)
}

/// `10·log10(255² / MSE)` on the `[0, 255]` rescaling, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    let mse = mse_255(a, b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h×w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|t| k[t] * p[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|t| k[t] * tmp[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels with an 11×11 Gaussian window (σ = 1.5), computed
/// on the `[0, 255]` rescaling with `K1 = 0.01`, `K2 = 0.03`.
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = a.values().data()[c * h * w..(c + 1) * h * w].iter().map(|&v| to_255(v)).collect();
        let pb: Vec<f64> = b.values().data()[c * h * w..(c + 1) * h * w].iter().map(|&v| to_255(v)).collect();
        let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(u, v)| u * v).collect() };
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &k);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &k);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &k);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

/// Fraction of positions where the two messages agree.
pub fn bit_accuracy(extracted: &BitMessage, truth: &BitMessage) -> Result<f64> {
    if extracted.len() != truth.len() {
        return Err(Error::shape(format!(
            "message lengths differ: {} vs {}",
            extracted.len(),
            truth.len()
        )));
    }
    let same = extracted
        .bits()
        .iter()
        .zip(truth.bits())
        .filter(|(a, b)| a == b)
        .count();
    Ok(same as f64 / truth.len() as f64)
}
