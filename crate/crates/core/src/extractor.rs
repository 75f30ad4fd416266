//! Watermark extraction network.
//!
//! Inputs of any resolution are bilinearly resized to `R×R`, passed through a
//! small residual CNN with three stride-2 stages, globally average-pooled and
//! mapped to `k` logits.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::grid::{images_to_batch, ImageGrid};
use crate::message::BitMessage;
use crate::nn::{Conv2d, Linear, Module, Param, Real, ResBlock, SpatialMap, Tape, Tensor, Var};

pub const CHECKPOINT_KIND: &str = "extractor";

#[derive(Clone, Debug)]
pub struct Extractor<T: Real = f32> {
    k: usize,
    resolution: usize,
    width: usize,
    conv_in: Conv2d<T>,
    stages: Vec<(Conv2d<T>, ResBlock<T>)>,
    head: Linear<T>,
}

impl<T: Real> Module<T> for Extractor<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut p = self.conv_in.params();
        for (c, r) in &self.stages {
            p.extend(c.params());
            p.extend(r.params());
        }
        p.extend(self.head.params());
        p
    }
}

impl<T: Real> Extractor<T> {
    /// `width` is the channel count of the first downsampled stage.
    pub fn new(k: usize, resolution: usize, width: usize, seed: u64) -> Result<Self> {
        if k == 0 || resolution < 8 || width < 2 {
            return Err(Error::Config(format!(
                "extractor needs k >= 1, R >= 8, width >= 2 (got {k}, {resolution}, {width})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe47);
        let widths = [width / 2, width, width * 3 / 2, width * 2];
        let conv_in = Conv2d::he("ext.conv_in", 3, widths[0], 3, 1, &mut rng);
        let stages = (0..3)
            .map(|i| {
                (
                    Conv2d::he(&format!("ext.down{i}"), widths[i], widths[i + 1], 3, 2, &mut rng),
                    ResBlock::new(&format!("ext.res{i}"), widths[i + 1], &mut rng),
                )
            })
            .collect();
        let head = Linear::new("ext.head", widths[3], k, &mut rng);
        Ok(Self {
            k,
            resolution,
            width,
            conv_in,
            stages,
            head,
        })
    }

    pub fn message_len(&self) -> usize {
        self.k
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn backbone(&self) -> String {
        format!("small-resnet-w{}", self.width)
    }

    /// `(N, 3, H, W)` images to `(N, k)` logits.
    pub fn forward<'t>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(format!("extractor expects (N, 3, H, W), got {s:?}")));
        }
        let r = self.resolution;
        let x = if s[2] != r || s[3] != r {
            x.spatial(&Arc::new(SpatialMap::resize(s[2], s[3], r, r)))
        } else {
            x
        };
        let mut h = self.conv_in.forward(x);
        for (down, res) in &self.stages {
            h = res.forward(down.forward(h.silu()));
        }
        Ok(self.head.forward(h.silu().global_avg_pool()))
    }

    pub fn logits_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        Ok((*self.forward(tape.constant(x.clone()))?.value()).clone())
    }
}

impl Extractor<f32> {
    pub fn extract_logits(&self, img: &ImageGrid) -> Result<Vec<f32>> {
        let x = images_to_batch(std::slice::from_ref(img))?;
        Ok(self.logits_batch(&x)?.into_data())
    }

    /// Bit `j` is set iff logit `j` is positive.
    pub fn extract_message(&self, img: &ImageGrid) -> Result<BitMessage> {
        BitMessage::from_logits(&self.extract_logits(img)?)
    }

    /// Extracted messages for every image of a `(N, 3, H, W)` batch.
    pub fn extract_batch(&self, x: &Tensor<f32>) -> Result<Vec<BitMessage>> {
        let logits = self.logits_batch(x)?;
        logits
            .data()
            .chunks(self.k)
            .map(BitMessage::from_logits)
            .collect()
    }

    pub fn save(&self, path: &Path, embedder_checksum: &str) -> Result<checkpoint::Manifest> {
        let meta = serde_json::json!({
            "k": self.k,
            "R": self.resolution,
            "width": self.width,
            "backbone": self.backbone(),
            "embedder_checksum": embedder_checksum,
        });
        checkpoint::save(path, CHECKPOINT_KIND, meta, &self.params())
    }

    /// Loads an extractor; returns it with the checksum of the embedder it was paired with.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let m = checkpoint::read_manifest(path)?;
        let get = |key: &str| {
            m.meta[key]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("extractor manifest lacks {key}")))
        };
        let ext = Self::new(get("k")?, get("R")?, get("width")?, 0)?;
        checkpoint::load_into(path, CHECKPOINT_KIND, &ext.params())?;
        let paired = m.meta["embedder_checksum"].as_str().unwrap_or_default().to_string();
        Ok((ext, paired))
    }
}
