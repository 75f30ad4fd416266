//! Staged latent autoencoder.
//!
//! The encoder downsamples by `f` with stride-2 convolutions. The decoder is
//! split into stages: a prelude maps the latent to features, then each stage
//! upsamples by 2 (nearest + conv + residual block), optionally followed by
//! one full-resolution output stage. The feature map entering stage `i` is the
//! tap point where watermark residuals are injected.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{HeldoutCorpus, ImageCorpus, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::grid::{images_to_batch, ImageGrid, ImageSource, LatentGrid};
use crate::metrics::psnr;
use crate::nn::{checksum, AdamW, Conv2d, Module, Param, Real, ResBlock, Tape, Tensor, Var};

pub const CHECKPOINT_KIND: &str = "autoencoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub downsample_factor: usize,
    pub latent_channels: usize,
    /// Feature widths from full resolution to latent resolution, `log2(f) + 1` entries.
    pub widths: Vec<usize>,
    /// Number of decoder tap points: `log2(f)` or `log2(f) + 1`.
    pub taps: usize,
    pub image_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub dataset_size: usize,
    pub heldout_size: usize,
    pub seed: u64,
    /// Weight of the mean squared latent magnitude in the pretraining loss.
    pub latent_penalty: f64,
    /// Linear learning-rate warmup before the cosine decay.
    pub warmup_steps: usize,
    pub max_grad_norm: f64,
    /// Pixel value range the decoder targets.
    pub normalization: (f64, f64),
}

impl AutoencoderConfig {
    /// Desk-scale reference setup for `f ∈ {4, 8}` on 64×64 images.
    pub fn desk(downsample_factor: usize) -> Self {
        let ups = downsample_factor.trailing_zeros() as usize;
        let widths = [16, 32, 48, 64, 96, 128][..=ups].to_vec();
        Self {
            downsample_factor,
            latent_channels: 4,
            widths,
            taps: downsample_factor / 2,
            image_size: 64,
            learning_rate: 1e-3,
            steps: 3000,
            batch_size: 8,
            dataset_size: 5000,
            heldout_size: 64,
            seed: 0,
            latent_penalty: 1e-4,
            warmup_steps: 100,
            max_grad_norm: 1.0,
            normalization: (-1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        if !f.is_power_of_two() || f < 2 {
            return Err(Error::Config(format!("downsample factor {f} must be a power of two >= 2")));
        }
        let ups = f.trailing_zeros() as usize;
        if self.widths.len() != ups + 1 || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "widths must list {} positive entries for f={f}",
                ups + 1
            )));
        }
        if self.taps != ups && self.taps != ups + 1 {
            return Err(Error::Config(format!(
                "taps must be {ups} or {} for f={f}, got {}",
                ups + 1,
                self.taps
            )));
        }
        if self.latent_channels == 0 || self.image_size % f != 0 {
            return Err(Error::Config("latent_channels must be >= 1 and image_size divisible by f".into()));
        }
        Ok(())
    }

    pub fn upsampling_steps(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }
}

#[derive(Clone, Debug)]
pub struct Encoder<T: Real = f32> {
    conv_in: Conv2d<T>,
    downs: Vec<(Conv2d<T>, ResBlock<T>)>,
    conv_out: Conv2d<T>,
    factor: usize,
}

impl<T: Real> Encoder<T> {
    fn new(cfg: &AutoencoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = &cfg.widths;
        let conv_in = Conv2d::new("enc.conv_in", 3, w[0], 3, 1, rng);
        let downs = (0..cfg.upsampling_steps())
            .map(|i| {
                (
                    Conv2d::new(&format!("enc.down{i}"), w[i], w[i + 1], 3, 2, rng),
                    ResBlock::new(&format!("enc.res{i}"), w[i + 1], rng),
                )
            })
            .collect();
        let conv_out = Conv2d::new("enc.conv_out", *w.last().unwrap(), cfg.latent_channels, 1, 1, rng);
        Self {
            conv_in,
            downs,
            conv_out,
            factor: cfg.downsample_factor,
        }
    }

    pub fn forward<'t>(&self, x: Var<'t, T>) -> Var<'t, T> {
        let mut h = self.conv_in.forward(x);
        for (down, res) in &self.downs {
            h = res.forward(down.forward(h.silu()));
        }
        self.conv_out.forward(h.silu())
    }

    pub fn downsample_factor(&self) -> usize {
        self.factor
    }
}

impl<T: Real> Module<T> for Encoder<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut p = self.conv_in.params();
        for (d, r) in &self.downs {
            p.extend(d.params());
            p.extend(r.params());
        }
        p.extend(self.conv_out.params());
        p
    }
}

#[derive(Clone, Debug)]
struct DecoderStage<T: Real> {
    upsample: bool,
    body: Option<(Conv2d<T>, ResBlock<T>)>,
    out: Option<Conv2d<T>>,
}

impl<T: Real> DecoderStage<T> {
    fn forward<'t>(&self, x: Var<'t, T>) -> Var<'t, T> {
        let mut h = if self.upsample { x.upsample2x() } else { x };
        if let Some((conv, res)) = &self.body {
            h = res.forward(conv.forward(h));
        }
        if let Some(out) = &self.out {
            h = out.forward(h.silu());
        }
        h
    }

    fn params(&self) -> Vec<Param<T>> {
        let mut p = Vec::new();
        if let Some((c, r)) = &self.body {
            p.extend(c.params());
            p.extend(r.params());
        }
        if let Some(o) = &self.out {
            p.extend(o.params());
        }
        p
    }
}

/// A decoder whose upsampling path is exposed stage by stage.
#[derive(Clone, Debug)]
pub struct StagedDecoder<T: Real = f32> {
    conv_in: Conv2d<T>,
    mid: ResBlock<T>,
    stages: Vec<DecoderStage<T>>,
    stage_channels: Vec<usize>,
    latent_channels: usize,
    factor: usize,
}

/// Per-stage hook: receives the stage index and the feature map entering that
/// stage, returns the (same-shaped) map to continue with.
pub type StageHook<'a, 't, T> = dyn FnMut(usize, Var<'t, T>) -> Result<Var<'t, T>> + 'a;

impl<T: Real> StagedDecoder<T> {
    fn new(cfg: &AutoencoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let w: Vec<usize> = cfg.widths.iter().rev().copied().collect();
        let ups = cfg.upsampling_steps();
        let conv_in = Conv2d::new("dec.conv_in", cfg.latent_channels, w[0], 3, 1, rng);
        let mid = ResBlock::new("dec.mid", w[0], rng);
        let mut stages = Vec::new();
        for i in 0..ups {
            let last = i + 1 == ups && cfg.taps == ups;
            stages.push(DecoderStage {
                upsample: true,
                body: Some((
                    Conv2d::new(&format!("dec.up{i}.conv"), w[i], w[i + 1], 3, 1, rng),
                    ResBlock::new(&format!("dec.up{i}.res"), w[i + 1], rng),
                )),
                out: last.then(|| Conv2d::new("dec.conv_out", w[i + 1], 3, 3, 1, rng)),
            });
        }
        if cfg.taps == ups + 1 {
            stages.push(DecoderStage {
                upsample: false,
                body: None,
                out: Some(Conv2d::new("dec.conv_out", w[ups], 3, 3, 1, rng)),
            });
        }
        let stage_channels = w[..cfg.taps].to_vec();
        Self {
            conv_in,
            mid,
            stages,
            stage_channels,
            latent_channels: cfg.latent_channels,
            factor: cfg.downsample_factor,
        }
    }

    /// Input channel count `C_i` at each tap point.
    pub fn stage_channels(&self) -> &[usize] {
        &self.stage_channels
    }

    /// Spatial scale factor applied by each stage (2 or 1).
    pub fn upsample_schedule(&self) -> Vec<usize> {
        self.stages.iter().map(|s| if s.upsample { 2 } else { 1 }).collect()
    }

    pub fn tap_count(&self) -> usize {
        self.stages.len()
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn downsample_factor(&self) -> usize {
        self.factor
    }

    /// Decodes a `(N, C, h, w)` latent batch, calling `hook` at every tap point.
    pub fn forward_hooked<'t>(
        &self,
        z: Var<'t, T>,
        hook: &mut StageHook<'_, 't, T>,
    ) -> Result<Var<'t, T>> {
        let shape = z.shape();
        if shape.len() != 4 || shape[1] != self.latent_channels {
            return Err(Error::shape(format!(
                "decoder expects (N, {}, h, w) latents, got {shape:?}",
                self.latent_channels
            )));
        }
        let mut h = self.mid.forward(self.conv_in.forward(z));
        for (i, stage) in self.stages.iter().enumerate() {
            let before = h.shape();
            let tapped = hook(i, h)?;
            if tapped.shape() != before {
                return Err(Error::shape(format!(
                    "stage {i} hook returned {:?}, expected {before:?}",
                    tapped.shape()
                )));
            }
            h = stage.forward(tapped);
        }
        Ok(h)
    }

    pub fn forward<'t>(&self, z: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_hooked(z, &mut |_, v| Ok(v))
    }
}

impl<T: Real> Module<T> for StagedDecoder<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut p = self.conv_in.params();
        p.extend(self.mid.params());
        for s in &self.stages {
            p.extend(s.params());
        }
        p
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder<T: Real = f32> {
    pub config: AutoencoderConfig,
    pub encoder: Encoder<T>,
    pub decoder: StagedDecoder<T>,
}

impl<T: Real> Module<T> for Autoencoder<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }
}

impl<T: Real> Autoencoder<T> {
    pub fn new(config: AutoencoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = Encoder::new(&config, &mut rng);
        let decoder = StagedDecoder::new(&config, &mut rng);
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn downsample_factor(&self) -> usize {
        self.config.downsample_factor
    }

    fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        let f = self.downsample_factor();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "image {h}x{w} is not divisible by downsample factor {f}"
            )));
        }
        Ok(())
    }

    /// Encodes an `(N, 3, H, W)` batch without recording gradients.
    pub fn encode_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, h, w) = x.dims4();
        if c != 3 {
            return Err(Error::shape(format!("encoder expects 3 channels, got {c}")));
        }
        self.check_resolution(h, w)?;
        let tape = Tape::new();
        Ok((*self.encoder.forward(tape.constant(x.clone())).value()).clone())
    }

    /// Decodes an `(N, C, h, w)` batch without recording gradients.
    pub fn decode_batch(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        Ok((*self.decoder.forward(tape.constant(z.clone()))?.value()).clone())
    }

    /// Checksum of all encoder and decoder weights.
    pub fn checksum(&self) -> String {
        checksum(&self.params())
    }
}

impl Autoencoder<f32> {
    pub fn encode(&self, x: &ImageGrid) -> Result<LatentGrid> {
        let z = self.encode_batch(&images_to_batch(std::slice::from_ref(x))?)?;
        LatentGrid::new(z.batch_item(0), 0)
    }

    pub fn decode(&self, z: &LatentGrid) -> Result<ImageGrid> {
        let b = Tensor::stack(std::slice::from_ref(z.values()));
        let x = self.decode_batch(&b)?;
        Ok(ImageGrid::new(x.batch_item(0))?.with_source(ImageSource::Generated))
    }

    /// Decodes `z`, passing each tap point's feature map through `tap`.
    pub fn decode_staged(
        &self,
        z: &LatentGrid,
        mut tap: impl FnMut(usize, &LatentGrid) -> Result<LatentGrid>,
    ) -> Result<ImageGrid> {
        let tape = Tape::new();
        let zb = tape.constant(Tensor::stack(std::slice::from_ref(z.values())));
        let out = self.decoder.forward_hooked(zb, &mut |i, v| {
            let grid = LatentGrid::new(v.value().batch_item(0), i)?;
            let next = tap(i, &grid)?;
            if next.dims() != grid.dims() {
                return Err(Error::shape(format!(
                    "stage {i} tap returned {:?}, expected {:?}",
                    next.dims(),
                    grid.dims()
                )));
            }
            Ok(tape.constant(Tensor::stack(std::slice::from_ref(next.values()))))
        })?;
        Ok(ImageGrid::new(out.value().batch_item(0))?.with_source(ImageSource::Generated))
    }

    pub fn save(&self, path: &Path) -> Result<checkpoint::Manifest> {
        let meta = serde_json::json!({
            "config": self.config,
            "f": self.config.downsample_factor,
            "stage_channels": self.decoder.stage_channels(),
            "normalization": self.config.normalization,
        });
        checkpoint::save(path, CHECKPOINT_KIND, meta, &self.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(path)?;
        let config: AutoencoderConfig = serde_json::from_value(manifest.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("autoencoder manifest: {e}")))?;
        let ae = Self::new(config)?;
        checkpoint::load_into(path, CHECKPOINT_KIND, &ae.params())?;
        Ok(ae)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub final_loss: f64,
    pub heldout_psnr: f64,
    pub losses: Vec<f64>,
}

/// Mean held-out reconstruction PSNR over `corpus`.
pub fn reconstruction_psnr(ae: &Autoencoder<f32>, corpus: &dyn ImageCorpus) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..corpus.len() {
        let x = corpus.get(i);
        let rec = ae.decode(&ae.encode(&x)?)?;
        total += psnr(&rec, &x)?;
    }
    Ok(total / corpus.len() as f64)
}

/// Trains a reference autoencoder on `dataset` with an MSE objective plus a
/// small latent-magnitude penalty. AdamW with a cosine learning-rate decay.
pub fn pretrain_reference_autoencoder(
    config: &AutoencoderConfig,
    dataset: &dyn ImageCorpus,
    mut progress: impl FnMut(usize, f64),
) -> Result<(Autoencoder<f32>, PretrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let ae = Autoencoder::<f32>::new(config.clone())?;
    let mut opt = AdamW::new(ae.params(), config.learning_rate);
    opt.max_grad_norm = (config.max_grad_norm > 0.0).then_some(config.max_grad_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xae);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let progress_frac = step as f64 / config.steps.max(1) as f64;
        let warm = ((step + 1) as f64 / config.warmup_steps.max(1) as f64).min(1.0);
        opt.lr = warm * config.learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress_frac).cos()));
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(dataset.get(order[cursor]));
            cursor += 1;
        }
        let x: Tensor<f32> = images_to_batch(&batch)?;
        let tape = Tape::new();
        let xv = tape.constant(x);
        let z = ae.encoder.forward(xv);
        let rec = ae.decoder.forward(z)?;
        let mse = rec.sub(xv).sqr().mean_all();
        let loss = mse.add(z.sqr().mean_all().mul_scalar(config.latent_penalty));
        let lv = loss.value().data()[0] as f64;
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "autoencoder loss".into(),
            });
        }
        let grads = tape.backward(loss);
        opt.step(&grads);
        losses.push(lv);
        progress(step, lv);
    }
    let heldout = HeldoutCorpus {
        size: config.image_size,
        len: config.heldout_size,
    };
    let heldout_psnr = reconstruction_psnr(&ae, &heldout)?;
    let final_loss = *losses.last().unwrap_or(&f64::NAN);
    Ok((
        ae,
        PretrainReport {
            final_loss,
            heldout_psnr,
            losses,
        },
    ))
}

/// Convenience: the procedural training corpus described by `config`.
pub fn default_corpus(config: &AutoencoderConfig) -> SyntheticCorpus {
    SyntheticCorpus {
        seed: config.seed,
        size: config.image_size,
        len: config.dataset_size,
    }
}
