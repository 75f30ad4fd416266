//! Procedural image corpus.
//!
//! Each image is a pure function of `(seed, size)`: a two-color gradient
//! background, a handful of soft-edged ellipses and rectangles, and a faint
//! sinusoidal texture. Held-out images use a disjoint seed range.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::{ImageGrid, ImageSource};
use crate::nn::Tensor;

/// Seeds at or above this offset are reserved for held-out images.
pub const HELDOUT_SEED_OFFSET: u64 = 1 << 40;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse,
    Rect,
}

fn smoothstep(edge: f64, x: f64) -> f64 {
    // signed distance `x` (negative inside), soft over `edge` pixels
    let t = (0.5 - x / edge).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

pub fn synthetic_image(seed: u64, size: usize) -> ImageGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e_0000_0000);
    let s = size as f64;
    let col = |rng: &mut ChaCha8Rng| -> [f64; 3] { [0; 3].map(|_| rng.random_range(-0.9..0.9)) };
    let c0 = col(&mut rng);
    let c1 = col(&mut rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ga, gb) = (angle.cos(), angle.sin());
    let mut px = vec![0f64; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f64 / s - 0.5) * ga + (y as f64 / s - 0.5) * gb + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                px[(c * size + y) * size + x] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    let n_shapes = rng.random_range(2..=5);
    for _ in 0..n_shapes {
        let shape = if rng.random_bool(0.5) {
            Shape::Ellipse
        } else {
            Shape::Rect
        };
        let cy = rng.random_range(0.0..s);
        let cx = rng.random_range(0.0..s);
        let ry = rng.random_range(0.08..0.3) * s;
        let rx = rng.random_range(0.08..0.3) * s;
        let rot: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (rs, rc) = rot.sin_cos();
        let color = col(&mut rng);
        let edge = rng.random_range(1.0..3.0);
        for y in 0..size {
            for x in 0..size {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let u = rc * dx + rs * dy;
                let v = -rs * dx + rc * dy;
                // approximate signed distance in pixels
                let d = match shape {
                    Shape::Ellipse => {
                        let r = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
                        (r - 1.0) * rx.min(ry)
                    }
                    Shape::Rect => (u.abs() - rx).max(v.abs() - ry),
                };
                let a = smoothstep(edge, d);
                if a > 0.0 {
                    for c in 0..3 {
                        let p = &mut px[(c * size + y) * size + x];
                        *p = *p * (1.0 - a) + color[c] * a;
                    }
                }
            }
        }
    }
    let amp = rng.random_range(0.0..0.08);
    let fy = rng.random_range(0.5..4.0) * std::f64::consts::TAU / s;
    let fx = rng.random_range(0.5..4.0) * std::f64::consts::TAU / s;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    for y in 0..size {
        for x in 0..size {
            let t = amp * (fy * y as f64 + fx * x as f64 + phase).sin();
            for c in 0..3 {
                px[(c * size + y) * size + x] += t;
            }
        }
    }
    let data = px.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect();
    ImageGrid::new(Tensor::from_vec(&[3, size, size], data))
        .expect("synthetic image is valid")
        .with_source(ImageSource::Cover)
}

/// Training image `i` of a corpus rooted at `seed`.
pub fn train_image(seed: u64, i: u64, size: usize) -> ImageGrid {
    synthetic_image(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i) % HELDOUT_SEED_OFFSET, size)
}

/// Held-out image `i`; never produced by [`train_image`].
pub fn heldout_image(i: u64, size: usize) -> ImageGrid {
    synthetic_image(HELDOUT_SEED_OFFSET + i, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synthetic_image(7, 32);
        assert_eq!(a, synthetic_image(7, 32));
        assert_ne!(a, synthetic_image(8, 32));
        assert!(a.values().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn images_have_content() {
        let img = synthetic_image(3, 64);
        let d = img.values().data();
        let mean = d.iter().sum::<f32>() / d.len() as f32;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / d.len() as f32;
        assert!(var > 1e-3, "variance {var}");
    }
}
