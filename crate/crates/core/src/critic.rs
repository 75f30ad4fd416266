//! Wasserstein critic and its losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Gradients, Linear, Module, Param, Real, Tape, Tensor, Var};

/// Small stride-2 conv scorer: image batch to one score per image.
#[derive(Clone, Debug)]
pub struct Critic<T: Real = f32> {
    convs: Vec<Conv2d<T>>,
    head: Linear<T>,
}

impl<T: Real> Module<T> for Critic<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut p: Vec<_> = self.convs.iter().flat_map(|c| c.params()).collect();
        p.extend(self.head.params());
        p
    }
}

impl<T: Real> Critic<T> {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc71);
        let w = [3, width, width * 2, width * 2];
        let convs = (0..3)
            .map(|i| Conv2d::he(&format!("critic.conv{i}"), w[i], w[i + 1], 3, 2, &mut rng))
            .collect();
        let head = Linear::new("critic.head", w[3], 1, &mut rng);
        Self { convs, head }
    }

    /// `(N, 3, H, W)` to `(N, 1)` scores.
    pub fn forward<'t>(&self, x: Var<'t, T>) -> Var<'t, T> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(h).silu();
        }
        self.head.forward(h.global_avg_pool())
    }
}

/// Adversarial terms on the tape: `(−mean C(x̂_w), mean C(x̂_w) − mean C(x̂))`.
pub fn critic_loss_vars<'t, T: Real>(
    critic: &Critic<T>,
    watermarked: Var<'t, T>,
    original: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if watermarked.shape().first().copied().unwrap_or(0) == 0 || original.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Empty("critic batch"));
    }
    let sw = critic.forward(watermarked).mean_all();
    let so = critic.forward(original).mean_all();
    Ok((sw.mul_scalar(-1.0), sw.sub(so)))
}

/// Values of `(l_adv_dw, l_adv_c)` for two batches.
pub fn critic_losses(critic: &Critic<f32>, watermarked: &Tensor<f32>, original: &Tensor<f32>) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let (a, b) = critic_loss_vars(critic, tape.constant(watermarked.clone()), tape.constant(original.clone()))?;
    Ok((a.value().data()[0] as f64, b.value().data()[0] as f64))
}

/// Gradient penalty `weight · mean (‖∇C(x̃)‖ − 1)²` at random interpolates
/// `x̃` of the two batches, recorded on `tape`. The gradient norm is taken as
/// the directional derivative along the (fixed) input-gradient direction,
/// evaluated by a central difference, so no second-order tape is needed.
pub fn gradient_penalty_var<'t, T: Real, R: Rng + ?Sized>(
    critic: &Critic<T>,
    tape: &'t Tape<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    weight: f64,
    rng: &mut R,
) -> Var<'t, T> {
    let (n, c, h, w) = real.dims4();
    let per = c * h * w;
    let mut mix = real.clone();
    for i in 0..n {
        let t = T::of(rng.random::<f64>());
        for j in i * per..(i + 1) * per {
            mix.data_mut()[j] = fake.data()[j] * t + real.data()[j] * (T::one() - t);
        }
    }
    let probe = Tape::new();
    let xv = probe.leaf(mix.clone(), true);
    let g = probe.backward(critic.forward(xv).sum_all());
    let mut dir = g.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(&[n, c, h, w]));
    for i in 0..n {
        let s = &mut dir.data_mut()[i * per..(i + 1) * per];
        let norm = s.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt().max(1e-12);
        for v in s.iter_mut() {
            *v = T::of(v.f64() / norm);
        }
    }
    let eps = 1e-2;
    let plus = tape.constant(mix.zip_map(&dir, |a, d| a + T::of(eps) * d));
    let minus = tape.constant(mix.zip_map(&dir, |a, d| a - T::of(eps) * d));
    let slope = critic.forward(plus).sub(critic.forward(minus)).mul_scalar(0.5 / eps);
    slope.add_scalar(-1.0).sqr().mean_all().mul_scalar(weight)
}

/// [`gradient_penalty_var`] on its own tape: the value and its parameter gradients.
pub fn gradient_penalty<T: Real, R: Rng + ?Sized>(
    critic: &Critic<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    weight: f64,
    rng: &mut R,
) -> (f64, Gradients<T>) {
    let tape = Tape::new();
    let pen = gradient_penalty_var(critic, &tape, real, fake, weight, rng);
    let value = pen.value().data()[0].f64();
    (value, tape.backward(pen))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_batch(seed: u64) -> Tensor<f32> {
        Tensor::uniform(&[3, 3, 16, 16], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn constant_critic() {
        let critic = Critic::<f32>::new(4, 0);
        for p in critic.params() {
            p.set(Tensor::zeros(&p.shape()));
        }
        critic.head.bias.set(Tensor::from_vec(&[1], vec![0.7]));
        let (dw, c) = critic_losses(&critic, &rand_batch(1), &rand_batch(2)).unwrap();
        assert!((dw + 0.7).abs() < 1e-7);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn matches_mean_of_scores_oracle() {
        let critic = Critic::<f64>::new(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xw = Tensor::<f64>::uniform(&[3, 3, 16, 16], -1.0, 1.0, &mut rng);
        let x = Tensor::<f64>::uniform(&[3, 3, 16, 16], -1.0, 1.0, &mut rng);
        let score = |b: &Tensor<f64>| -> Vec<f64> {
            (0..3)
                .map(|i| {
                    let tape = Tape::new();
                    let one = Tensor::stack(&[b.batch_item(i)]);
                    critic.forward(tape.constant(one)).value().data()[0]
                })
                .collect()
        };
        let (sw, so) = (score(&xw), score(&x));
        let mut mw = 0.0;
        let mut mo = 0.0;
        for i in 0..3 {
            mw += sw[i];
            mo += so[i];
        }
        mw /= 3.0;
        mo /= 3.0;
        let tape = Tape::new();
        let (dw, c) = critic_loss_vars(&critic, tape.constant(xw.clone()), tape.constant(x.clone())).unwrap();
        let (dw, c) = (dw.value().data()[0], c.value().data()[0]);
        assert!((dw + mw).abs() <= 1e-6 * mw.abs());
        assert!((c - (mw - mo)).abs() <= 1e-6 * (mw - mo).abs());
        assert!((c - (-dw - mo)).abs() <= 1e-12);
        let c32 = Critic::<f32>::new(4, 1);
        let same = Tensor::<f32>::uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut rng);
        assert_eq!(critic_losses(&c32, &same, &same).unwrap().1, 0.0);
    }

    #[test]
    fn penalty_is_finite_and_reaches_every_parameter() {
        let critic = Critic::<f32>::new(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (v, g) = gradient_penalty(&critic, &rand_batch(5), &rand_batch(6), 10.0, &mut rng);
        assert!(v.is_finite() && v >= 0.0);
        for p in critic.params() {
            assert!(g.param(&p).is_some(), "{}", p.name());
        }
    }

    #[test]
    fn penalty_slope_matches_gradient_norm() {
        // the central difference along the gradient direction recovers ‖∇C‖
        let critic = Critic::<f64>::new(4, 3);
        let x = Tensor::<f64>::uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let g = tape.backward(critic.forward(xv).sum_all());
        let norm = g.get(xv).unwrap().data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // real == fake, so the interpolate is x itself
        let (pen, _) = gradient_penalty(&critic, &x, &x, 1.0, &mut rng);
        assert!((pen.sqrt() - (norm - 1.0).abs()).abs() < 1e-4 * (1.0 + norm), "{pen} vs {norm}");
    }

    #[test]
    fn empty_batch_is_an_error() {
        let critic = Critic::<f32>::new(4, 0);
        let e = Tensor::zeros(&[0, 3, 16, 16]);
        assert!(critic_losses(&critic, &e, &e).is_err());
    }
}
