//! Per-stage watermark embedding modules and the watermarking decoder.
//!
//! Module `i` maps the message (as ±1) through a linear layer to a `(C_i, B, B)`
//! noise block, tiles it over the stage's spatial extent and fuses it with a
//! zero-initialized 3×3 convolution. The result `δz_i` is added to the feature
//! map entering decoder stage `i`.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{Autoencoder, StagedDecoder};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::grid::{images_to_batch, ImageGrid, ImageSource, LatentGrid};
use crate::message::BitMessage;
use crate::nn::{Conv2d, Linear, Module, Param, Real, SpatialMap, Tape, Tensor, Var};

pub const CHECKPOINT_KIND: &str = "embedder";

#[derive(Clone, Debug)]
pub struct EmbedModule<T: Real = f32> {
    stage_index: usize,
    channels: usize,
    block: usize,
    pub linear: Linear<T>,
    pub fusion: Conv2d<T>,
}

impl<T: Real> EmbedModule<T> {
    pub fn new(stage_index: usize, k: usize, block: usize, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let name = format!("emb{stage_index}");
        Self {
            stage_index,
            channels,
            block,
            linear: Linear::new(&format!("{name}.linear"), k, block * block * channels, rng),
            fusion: Conv2d::zeros(&format!("{name}.fusion"), channels, channels, 3),
        }
    }

    pub fn stage_index(&self) -> usize {
        self.stage_index
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    pub fn message_len(&self) -> usize {
        self.linear.in_features()
    }

    /// `(N, k)` signed messages to `(N, C_i, B, B)` noise blocks.
    pub fn noise_blocks<'t>(&self, msgs: Var<'t, T>) -> Var<'t, T> {
        let n = msgs.shape()[0];
        self.linear
            .forward(msgs)
            .reshape(&[n, self.channels, self.block, self.block])
    }

    /// `δz_i` for a `(N, C_i, h, w)` feature batch.
    pub fn residual<'t>(&self, z: Var<'t, T>, msgs: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.channels || msgs.shape()[0] != s[0] {
            return Err(Error::shape(format!(
                "stage {}: expected (N={}, {}, h, w) features, got {s:?}",
                self.stage_index,
                msgs.shape()[0],
                self.channels
            )));
        }
        if msgs.shape()[1] != self.message_len() {
            return Err(Error::shape(format!(
                "stage {}: message has {} bits, module expects {}",
                self.stage_index,
                msgs.shape()[1],
                self.message_len()
            )));
        }
        let tile = Arc::new(SpatialMap::tile(self.block, self.block, s[2], s[3]));
        Ok(self.fusion.forward(self.noise_blocks(msgs).spatial(&tile)))
    }
}

impl<T: Real> Module<T> for EmbedModule<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut p = self.linear.params();
        p.extend(self.fusion.params());
        p
    }
}

/// One embedding module per decoder tap point.
#[derive(Clone, Debug)]
pub struct EmbedderStack<T: Real = f32> {
    pub modules: Vec<EmbedModule<T>>,
    k: usize,
    block: usize,
    autoencoder_checksum: String,
}

impl<T: Real> Module<T> for EmbedderStack<T> {
    fn params(&self) -> Vec<Param<T>> {
        self.modules.iter().flat_map(|m| m.params()).collect()
    }
}

/// `(N, k)` batch of ±1 message encodings.
pub fn message_batch<T: Real>(msgs: &[BitMessage]) -> Result<Tensor<T>> {
    let k = msgs.first().ok_or(Error::Empty("message batch"))?.len();
    let mut data = Vec::with_capacity(msgs.len() * k);
    for m in msgs {
        if m.len() != k {
            return Err(Error::shape(format!("messages of length {} and {k} in one batch", m.len())));
        }
        data.extend(m.as_signed().into_iter().map(|v| T::of(v as f64)));
    }
    Ok(Tensor::from_vec(&[msgs.len(), k], data))
}

impl<T: Real> EmbedderStack<T> {
    /// Fresh stack bound to `ae`: fusion convolutions are exactly zero.
    pub fn new(ae: &Autoencoder<T>, k: usize, block: usize, seed: u64) -> Result<Self> {
        if k == 0 || block == 0 {
            return Err(Error::Config("k and B must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe3b);
        let modules = ae
            .decoder
            .stage_channels()
            .iter()
            .enumerate()
            .map(|(i, &c)| EmbedModule::new(i, k, block, c, &mut rng))
            .collect();
        Ok(Self {
            modules,
            k,
            block,
            autoencoder_checksum: ae.checksum(),
        })
    }

    pub fn message_len(&self) -> usize {
        self.k
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.modules.iter().map(|m| m.channels).collect()
    }

    pub fn autoencoder_checksum(&self) -> &str {
        &self.autoencoder_checksum
    }

    fn check_decoder(&self, dec: &StagedDecoder<T>) -> Result<()> {
        if dec.stage_channels() != self.stage_channels().as_slice() {
            return Err(Error::shape(format!(
                "embedder stages {:?} do not match decoder stages {:?}",
                self.stage_channels(),
                dec.stage_channels()
            )));
        }
        Ok(())
    }

    /// `D_w(z, m)` on a latent batch with `(N, k)` signed messages.
    pub fn decode<'t>(&self, dec: &StagedDecoder<T>, z: Var<'t, T>, msgs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_decoder(dec)?;
        dec.forward_hooked(z, &mut |i, zi| Ok(zi.add(self.modules[i].residual(zi, msgs)?)))
    }

    /// `D_w(z, m)` without gradient tracking.
    pub fn decode_batch(&self, ae: &Autoencoder<T>, z: &Tensor<T>, msgs: &[BitMessage]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let out = self.decode(&ae.decoder, tape.constant(z.clone()), tape.constant(message_batch(msgs)?))?;
        Ok((*out.value()).clone())
    }
}

/// The `(C_i, B, B)` noise block module `i` derives from `m`.
pub fn make_noise_block(module: &EmbedModule<f32>, m: &BitMessage) -> Result<Tensor<f32>> {
    if m.len() != module.message_len() {
        return Err(Error::shape(format!(
            "message has {} bits, module expects {}",
            m.len(),
            module.message_len()
        )));
    }
    let tape = Tape::new();
    let b = module.noise_blocks(tape.constant(message_batch(std::slice::from_ref(m))?));
    Ok(b.value().batch_item(0))
}

/// Repeats a `(C, B, B)` block over `target_h × target_w`, cropping the last partial tile.
pub fn spatial_tile(block: &Tensor<f32>, target_h: usize, target_w: usize) -> Result<Tensor<f32>> {
    let s = block.shape();
    if s.len() != 3 || target_h == 0 || target_w == 0 {
        return Err(Error::shape(format!("cannot tile block {s:?} to {target_h}x{target_w}")));
    }
    let b4 = block.clone().reshape(&[1, s[0], s[1], s[2]]);
    Ok(SpatialMap::tile(s[1], s[2], target_h, target_w)
        .apply(&b4)
        .reshape(&[s[0], target_h, target_w]))
}

/// `δz_i = W_Emb_i(z_i, m)`.
pub fn embed_residual(module: &EmbedModule<f32>, z: &LatentGrid, m: &BitMessage) -> Result<LatentGrid> {
    let tape = Tape::new();
    let zb = tape.constant(Tensor::stack(std::slice::from_ref(z.values())));
    let msgs = tape.constant(message_batch(std::slice::from_ref(m))?);
    let d = module.residual(zb, msgs)?;
    LatentGrid::new(d.value().batch_item(0), module.stage_index)
}

/// Decodes `z` while embedding `m`.
pub fn decode_watermarked(
    stack: &EmbedderStack<f32>,
    ae: &Autoencoder<f32>,
    z: &LatentGrid,
    m: &BitMessage,
) -> Result<ImageGrid> {
    let zb = Tensor::stack(std::slice::from_ref(z.values()));
    let out = stack.decode_batch(ae, &zb, std::slice::from_ref(m))?;
    Ok(ImageGrid::new(out.batch_item(0))?.with_source(ImageSource::Generated))
}

/// `D_w(E(x), m) − D(E(x))` as an unclamped `(N, 3, H, W)` batch.
pub fn residual_mask_batch(
    stack: &EmbedderStack<f32>,
    ae: &Autoencoder<f32>,
    covers: &Tensor<f32>,
    msgs: &[BitMessage],
) -> Result<Tensor<f32>> {
    let z = ae.encode_batch(covers)?;
    let wm = stack.decode_batch(ae, &z, msgs)?;
    let plain = ae.decode_batch(&z)?;
    Ok(wm.zip_map(&plain, |a, b| a - b))
}

/// Post-generation watermarking: `clamp(x + D_w(E(x), m) − D(E(x)))`.
pub fn watermark_cover_image(
    stack: &EmbedderStack<f32>,
    ae: &Autoencoder<f32>,
    x: &ImageGrid,
    m: &BitMessage,
) -> Result<ImageGrid> {
    let covers = images_to_batch(std::slice::from_ref(x))?;
    let mask = residual_mask_batch(stack, ae, &covers, std::slice::from_ref(m))?;
    let out = covers.zip_map(&mask, |a, b| a + b);
    Ok(ImageGrid::new(out.batch_item(0))?.with_source(ImageSource::Generated))
}

impl EmbedderStack<f32> {
    pub fn save(&self, path: &Path) -> Result<checkpoint::Manifest> {
        let meta = serde_json::json!({
            "k": self.k,
            "B": self.block,
            "stage_channels": self.stage_channels(),
            "autoencoder_checksum": self.autoencoder_checksum,
        });
        checkpoint::save(path, CHECKPOINT_KIND, meta, &self.params())
    }

    /// Loads a stack trained against `ae`; any other autoencoder is rejected.
    pub fn load(path: &Path, ae: &Autoencoder<f32>) -> Result<Self> {
        let m = checkpoint::read_manifest(path)?;
        let want = m.meta["autoencoder_checksum"].as_str().unwrap_or_default();
        if want != ae.checksum() {
            return Err(Error::Checkpoint(format!(
                "embedder was trained against autoencoder {want}, loaded autoencoder is {}",
                ae.checksum()
            )));
        }
        let k = m.meta["k"].as_u64().ok_or_else(|| Error::Checkpoint("manifest lacks k".into()))? as usize;
        let b = m.meta["B"].as_u64().ok_or_else(|| Error::Checkpoint("manifest lacks B".into()))? as usize;
        let stack = Self::new(ae, k, b, 0)?;
        checkpoint::load_into(path, CHECKPOINT_KIND, &stack.params())?;
        Ok(stack)
    }
}
