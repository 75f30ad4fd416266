//! Feature-space image distance.
//!
//! A fixed, randomly initialized conv pyramid (three scales). Features at each
//! scale are normalized to unit length across channels; the distance sums the
//! squared difference over channels, averages it over positions and batch, and
//! sums over scales.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Module, Param, Real, Var};

#[derive(Clone, Debug)]
pub struct PerceptualNet<T: Real = f32> {
    layers: Vec<Conv2d<T>>,
}

impl<T: Real> Module<T> for PerceptualNet<T> {
    fn params(&self) -> Vec<Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

impl<T: Real> PerceptualNet<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1e7);
        let layers = vec![
            Conv2d::new("perc.l0", 3, 8, 3, 1, &mut rng),
            Conv2d::new("perc.l1", 8, 16, 3, 2, &mut rng),
            Conv2d::new("perc.l2", 16, 32, 3, 2, &mut rng),
        ];
        let net = Self { layers };
        net.set_trainable(false);
        net
    }

    fn features<'t>(&self, x: Var<'t, T>) -> Vec<Var<'t, T>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            h = l.forward(h).silu();
            out.push(h.channel_unit_norm(1e-6));
        }
        out
    }

    /// Distance between two `(N, 3, H, W)` batches.
    pub fn loss<'t>(&self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "perceptual loss inputs differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let fa = self.features(a);
        let fb = self.features(b);
        let mut total: Option<Var<'t, T>> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let c = x.shape()[1] as f64;
            let d = x.sub(y).sqr().mean_all().mul_scalar(c);
            total = Some(match total {
                Some(t) => t.add(d),
                None => d,
            });
        }
        Ok(total.expect("pyramid has layers"))
    }
}
