//! Joint training of the embedding stack and the extractor against a frozen
//! autoencoder, with a WGAN critic and a bit-accuracy-gated attack schedule.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{apply_attack_var, AttackKind, AttackSampler, AttackSpec};
use crate::autoencoder::Autoencoder;
use crate::checkpoint;
use crate::config::WatermarkConfig;
use crate::corpus::ImageCorpus;
use crate::critic::{critic_loss_vars, gradient_penalty_var, Critic};
use crate::embedder::{message_batch, EmbedderStack};
use crate::error::{Error, Result};
use crate::extractor::Extractor;
use crate::grid::images_to_batch;
use crate::message::BitMessage;
use crate::nn::{checksum, AdamW, Module, Param, Real, Tape, Tensor, Var};
use crate::perceptual::PerceptualNet;

pub const CRITIC_KIND: &str = "critic";
const CRITIC_WIDTH: usize = 16;

/// Every loss term of one generator step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_i: f64,
    pub l_lpips: f64,
    pub l_adv_dw: f64,
    pub l_adv_c: f64,
    pub l_ext: f64,
    pub l_rec: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Fills `l_rec` and `l_total` from the component terms.
    pub fn compose(cfg: &WatermarkConfig, l_i: f64, l_lpips: f64, l_adv_dw: f64, l_adv_c: f64, l_ext: f64) -> Self {
        let l_rec = cfg.lambda_i * l_i + cfg.lambda_lpips * l_lpips + cfg.lambda_adv * l_adv_dw;
        Self {
            l_i,
            l_lpips,
            l_adv_dw,
            l_adv_c,
            l_ext,
            l_rec,
            l_total: l_rec + cfg.lambda * l_ext,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_i, self.l_lpips, self.l_adv_dw, self.l_adv_c, self.l_ext, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean squared difference of two equally shaped tensors.
pub fn distortion_loss(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("distortion loss inputs differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let tape = Tape::new();
    let d = tape.constant(a.clone()).sub(tape.constant(b.clone())).sqr().mean_all();
    Ok(d.value().data()[0] as f64)
}

pub fn perceptual_loss(net: &PerceptualNet<f32>, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let tape = Tape::new();
    let d = net.loss(tape.constant(a.clone()), tape.constant(b.clone()))?;
    Ok(d.value().data()[0] as f64)
}

/// Mean binary cross-entropy of `logits` against the message bits.
pub fn extraction_loss(logits: &[f32], m: &BitMessage) -> Result<f64> {
    if logits.len() != m.len() {
        return Err(Error::shape(format!("{} logits for a {}-bit message", logits.len(), m.len())));
    }
    let tape = Tape::new();
    let l = tape.constant(Tensor::from_vec(&[1, logits.len()], logits.to_vec()));
    let t = Tensor::from_vec(&[1, m.len()], m.as_targets());
    Ok(l.bce_with_logits(&t).value().data()[0] as f64)
}

/// Everything the trainer optimizes or consults.
#[derive(Clone, Debug)]
pub struct WatermarkModels<T: Real = f32> {
    pub autoencoder: Autoencoder<T>,
    pub embedder: EmbedderStack<T>,
    pub extractor: Extractor<T>,
    pub critic: Critic<T>,
    pub perceptual: PerceptualNet<T>,
}

impl<T: Real> WatermarkModels<T> {
    /// Fresh models around a frozen autoencoder.
    pub fn new(autoencoder: Autoencoder<T>, cfg: &WatermarkConfig) -> Result<Self> {
        cfg.validate()?;
        check_against_autoencoder(cfg, &autoencoder)?;
        autoencoder.set_trainable(false);
        let embedder = EmbedderStack::new(&autoencoder, cfg.k, cfg.block_size, cfg.seed)?;
        let extractor = Extractor::new(cfg.k, cfg.extractor_resolution, cfg.extractor_width, cfg.seed)?;
        let critic = Critic::new(CRITIC_WIDTH, cfg.seed);
        let perceptual = PerceptualNet::new(cfg.seed);
        Ok(Self {
            autoencoder,
            embedder,
            extractor,
            critic,
            perceptual,
        })
    }

    /// Embedding stack and extractor parameters.
    pub fn generator_params(&self) -> Vec<Param<T>> {
        let mut p = self.embedder.params();
        p.extend(self.extractor.params());
        p
    }
}

fn check_against_autoencoder<T: Real>(cfg: &WatermarkConfig, ae: &Autoencoder<T>) -> Result<()> {
    if cfg.stage_channels != ae.decoder.stage_channels() {
        return Err(Error::Config(format!(
            "stage_channels {:?} do not match the autoencoder's {:?}",
            cfg.stage_channels,
            ae.decoder.stage_channels()
        )));
    }
    if cfg.downsample_factor != ae.downsample_factor() {
        return Err(Error::Config(format!(
            "downsample_factor {} does not match the autoencoder's {}",
            cfg.downsample_factor,
            ae.downsample_factor()
        )));
    }
    Ok(())
}

/// Tape handles of one generator pass.
pub struct GeneratorPass<'t, T: Real> {
    pub watermarked: Var<'t, T>,
    pub logits: Var<'t, T>,
    pub l_i: Var<'t, T>,
    pub l_lpips: Var<'t, T>,
    pub l_adv_dw: Var<'t, T>,
    pub l_adv_c: Var<'t, T>,
    pub l_ext: Var<'t, T>,
    pub l_total: Var<'t, T>,
}

impl<T: Real> GeneratorPass<'_, T> {
    pub fn breakdown(&self, cfg: &WatermarkConfig) -> LossBreakdown {
        let v = |x: &Var<'_, T>| x.value().data()[0].f64();
        LossBreakdown::compose(cfg, v(&self.l_i), v(&self.l_lpips), v(&self.l_adv_dw), v(&self.l_adv_c), v(&self.l_ext))
    }
}

/// Records `l_total` for latents `z`, their clean decodes `x_hat`, messages
/// and one attack on `tape`.
pub fn generator_pass<'t, T: Real>(
    models: &WatermarkModels<T>,
    cfg: &WatermarkConfig,
    tape: &'t Tape<T>,
    z: &Tensor<T>,
    x_hat: &Tensor<T>,
    msgs: &[BitMessage],
    attack: &AttackSpec,
) -> Result<GeneratorPass<'t, T>> {
    let zv = tape.constant(z.clone());
    let xh = tape.constant(x_hat.clone());
    let mv = tape.constant(message_batch(msgs)?);
    let xw = models.embedder.decode(&models.autoencoder.decoder, zv, mv)?;
    let l_i = xw.sub(xh).sqr().mean_all();
    let l_lpips = models.perceptual.loss(xw, xh)?;
    let (l_adv_dw, l_adv_c) = critic_loss_vars(&models.critic, xw, xh)?;
    let attacked = if attack.kind == AttackKind::Reencode {
        let ae = &models.autoencoder;
        ae.decoder.forward(ae.encoder.forward(xw.clamp(-1.0, 1.0)))?
    } else {
        apply_attack_var(attack, xw.clamp(-1.0, 1.0))?
    };
    let logits = models.extractor.forward(attacked)?;
    let mut targets = Vec::with_capacity(msgs.len() * cfg.k);
    for m in msgs {
        targets.extend(m.as_targets().into_iter().map(|b| T::of(b as f64)));
    }
    let l_ext = logits.bce_with_logits(&Tensor::from_vec(&[msgs.len(), cfg.k], targets));
    let l_rec = l_i
        .mul_scalar(cfg.lambda_i)
        .add(l_lpips.mul_scalar(cfg.lambda_lpips))
        .add(l_adv_dw.mul_scalar(cfg.lambda_adv));
    let l_total = l_rec.add(l_ext.mul_scalar(cfg.lambda));
    Ok(GeneratorPass {
        watermarked: xw,
        logits,
        l_i,
        l_lpips,
        l_adv_dw,
        l_adv_c,
        l_ext,
        l_total,
    })
}

/// Fraction of logits whose sign agrees with the message bits.
pub fn logits_accuracy<T: Real>(logits: &Tensor<T>, msgs: &[BitMessage]) -> f64 {
    let k = msgs.first().map_or(1, |m| m.len());
    let mut ok = 0usize;
    for (i, m) in msgs.iter().enumerate() {
        for j in 0..k {
            ok += usize::from((logits.data()[i * k + j] > T::zero()) == m.bit(j));
        }
    }
    ok as f64 / (msgs.len() * k).max(1) as f64
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_i: f64,
    pub l_lpips: f64,
    pub l_adv_dw: f64,
    pub l_adv_c: f64,
    pub l_ext: f64,
    pub l_total: f64,
    pub bit_acc: f64,
    pub attack_active: bool,
    pub attack: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bit_acc: f64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory receiving checkpoints, the config snapshot and `metrics.jsonl`.
    pub out_dir: Option<PathBuf>,
    pub progress: Option<Box<dyn FnMut(&StepRecord) + 'a>>,
}

pub struct TrainOutcome {
    pub models: WatermarkModels<f32>,
    pub records: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// First step at which attacks were active.
    pub gate_opened_at: Option<usize>,
}

/// Latents and clean decodes of a whole corpus.
pub struct LatentCache {
    pub latents: Vec<Tensor<f32>>,
    pub decoded: Vec<Tensor<f32>>,
}

impl LatentCache {
    pub fn build(ae: &Autoencoder<f32>, dataset: &dyn ImageCorpus) -> Result<Self> {
        let mut latents = Vec::with_capacity(dataset.len());
        let mut decoded = Vec::with_capacity(dataset.len());
        let chunk = 16;
        for start in (0..dataset.len()).step_by(chunk) {
            let imgs: Vec<_> = (start..(start + chunk).min(dataset.len())).map(|i| dataset.get(i)).collect();
            let z = ae.encode_batch(&images_to_batch(&imgs)?)?;
            let x = ae.decode_batch(&z)?;
            for i in 0..imgs.len() {
                latents.push(z.batch_item(i));
                decoded.push(x.batch_item(i));
            }
        }
        Ok(Self { latents, decoded })
    }
}

struct GateState {
    window: VecDeque<f64>,
    size: usize,
    threshold: f64,
    open: bool,
}

impl GateState {
    fn observe(&mut self, clean_acc: f64) {
        if self.open {
            return;
        }
        self.window.push_back(clean_acc);
        if self.window.len() > self.size {
            self.window.pop_front();
        }
        let mean = self.window.iter().sum::<f64>() / self.window.len() as f64;
        if self.window.len() == self.size && mean >= self.threshold {
            self.open = true;
        }
    }
}

fn snapshot(params: &[Param<f32>]) -> Vec<Tensor<f32>> {
    params.iter().map(|p| p.value()).collect()
}

fn restore(params: &[Param<f32>], snap: &[Tensor<f32>]) {
    for (p, t) in params.iter().zip(snap) {
        p.set(t.clone());
    }
}

/// Trains embedding modules and extractor on `dataset` through the frozen `ae`.
pub fn train(
    cfg: &WatermarkConfig,
    ae: Autoencoder<f32>,
    dataset: &dyn ImageCorpus,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let first = dataset.get(0);
    if first.height() != cfg.image_size || first.width() != cfg.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}x{}, config image_size is {}",
            first.height(),
            first.width(),
            cfg.image_size
        )));
    }
    let models = WatermarkModels::new(ae, cfg)?;
    let frozen_before = models.autoencoder.checksum();
    let cache = LatentCache::build(&models.autoencoder, dataset)?;

    let gen_params = models.generator_params();
    let mut gen_opt = AdamW::new(gen_params.clone(), cfg.learning_rate);
    let mut critic_opt = AdamW::new(models.critic.params(), cfg.critic_learning_rate).with_betas(0.5, 0.9);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = AttackSampler {
        active: false,
        ..AttackSampler::default()
    };
    let mut gate = GateState {
        window: VecDeque::new(),
        size: cfg.gate_window.max(1),
        threshold: cfg.attack_threshold,
        open: false,
    };

    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            cfg.save(&dir.join("config.toml"))?;
            Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };

    let all_params: Vec<Param<f32>> = gen_params.iter().cloned().chain(models.critic.params()).collect();
    let mut last_good = snapshot(&all_params);
    let mut order: Vec<usize> = (0..cache.latents.len()).collect();
    let mut cursor = order.len();
    let steps_per_epoch = cache.latents.len().div_ceil(cfg.batch_size);
    let mut records = Vec::new();
    let mut epochs = Vec::new();
    let mut epoch_acc = Vec::new();
    let mut gate_opened_at = None;

    let total_steps = cfg.total_steps();
    for step in 0..total_steps {
        // cosine decay to 5% of the base rates
        let decay = 0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
        gen_opt.lr = cfg.learning_rate * decay;
        critic_opt.lr = cfg.critic_learning_rate * decay;
        let mut idx = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let z = Tensor::stack(&idx.iter().map(|&i| cache.latents[i].clone()).collect::<Vec<_>>());
        let x_hat = Tensor::stack(&idx.iter().map(|&i| cache.decoded[i].clone()).collect::<Vec<_>>());
        let msgs: Vec<BitMessage> = (0..idx.len()).map(|_| BitMessage::random_with(cfg.k, &mut rng)).collect();
        sampler.active = gate.open;
        let attack = if gate.open && cfg.reencode_prob > 0.0 && rng.random_bool(cfg.reencode_prob) {
            AttackSpec::new(AttackKind::Reencode, 0.0)
        } else {
            sampler.sample(&mut rng)
        };
        if gate.open && gate_opened_at.is_none() {
            gate_opened_at = Some(step);
        }

        // generator update; the critic is only a scorer here
        models.critic.set_trainable(false);
        let tape = Tape::new();
        let pass = generator_pass(&models, cfg, &tape, &z, &x_hat, &msgs, &attack)?;
        let breakdown = pass.breakdown(cfg);
        let acc = logits_accuracy(&pass.logits.value(), &msgs);
        let xw = (*pass.watermarked.value()).clone();
        if !breakdown.is_finite() {
            return abort(&models, &all_params, &last_good, &opts.out_dir, step);
        }
        let grads = tape.backward(pass.l_total);
        gen_opt.step(&grads);
        drop(grads);
        drop(tape);
        models.critic.set_trainable(true);

        if !gate.open {
            // identity attack: these logits are the clean ones
            gate.observe(acc);
        }

        // critic update on clean watermarked vs. original decodes
        if cfg.lambda_adv > 0.0 {
            let tape = Tape::new();
            let (_, l_c) = critic_loss_vars(&models.critic, tape.constant(xw.clone()), tape.constant(x_hat.clone()))?;
            let gp = gradient_penalty_var(&models.critic, &tape, &x_hat, &xw, cfg.gradient_penalty, &mut rng);
            let total = l_c.add(gp);
            if !total.value().all_finite() {
                return abort(&models, &all_params, &last_good, &opts.out_dir, step);
            }
            let g = tape.backward(total);
            critic_opt.step(&g);
        }

        if step % 50 == 0 {
            last_good = snapshot(&all_params);
        }

        let rec = StepRecord {
            step,
            l_i: breakdown.l_i,
            l_lpips: breakdown.l_lpips,
            l_adv_dw: breakdown.l_adv_dw,
            l_adv_c: breakdown.l_adv_c,
            l_ext: breakdown.l_ext,
            l_total: breakdown.l_total,
            bit_acc: acc,
            attack_active: sampler.active,
            attack: format!("{}:{:.3}", attack.kind, attack.param),
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        }
        if let Some(p) = opts.progress.as_mut() {
            p(&rec);
        }
        epoch_acc.push(acc);
        if (step + 1) % steps_per_epoch == 0 || step + 1 == cfg.total_steps() {
            let e = EpochRecord {
                epoch: epochs.len(),
                bit_acc: epoch_acc.iter().sum::<f64>() / epoch_acc.len() as f64,
            };
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&e).expect("record serializes"))?;
            }
            epochs.push(e);
            epoch_acc.clear();
        }
        records.push(rec);
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    if models.autoencoder.checksum() != frozen_before {
        return Err(Error::invalid("frozen autoencoder weights changed during training"));
    }
    if let Some(dir) = &opts.out_dir {
        save_run(dir, &models, cfg)?;
    }
    Ok(TrainOutcome {
        models,
        records,
        epochs,
        gate_opened_at,
    })
}

fn abort(
    models: &WatermarkModels<f32>,
    params: &[Param<f32>],
    last_good: &[Tensor<f32>],
    out_dir: &Option<PathBuf>,
    step: usize,
) -> Result<TrainOutcome> {
    restore(params, last_good);
    if let Some(dir) = out_dir {
        let cfg = WatermarkConfig::load(&dir.join("config.toml"))?;
        save_run(dir, models, &cfg)?;
    }
    Err(Error::NonFinite {
        step,
        what: "training loss".into(),
    })
}

/// Writes `{autoencoder,embedder,extractor,critic}.ckpt` and `config.toml`.
pub fn save_run(dir: &Path, models: &WatermarkModels<f32>, cfg: &WatermarkConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    models.autoencoder.save(&dir.join("autoencoder.ckpt"))?;
    models.embedder.save(&dir.join("embedder.ckpt"))?;
    models.extractor.save(&dir.join("extractor.ckpt"), &checksum(&models.embedder.params()))?;
    checkpoint::save(
        &dir.join("critic.ckpt"),
        CRITIC_KIND,
        serde_json::json!({ "width": CRITIC_WIDTH }),
        &models.critic.params(),
    )?;
    cfg.save(&dir.join("config.toml"))
}

/// Loads a run directory written by [`save_run`].
pub fn load_run(dir: &Path) -> Result<(WatermarkConfig, WatermarkModels<f32>)> {
    let cfg = WatermarkConfig::load(&dir.join("config.toml"))?;
    let ae = Autoencoder::load(&dir.join("autoencoder.ckpt"))?;
    let mut models = WatermarkModels::new(ae, &cfg)?;
    models.embedder = EmbedderStack::load(&dir.join("embedder.ckpt"), &models.autoencoder)?;
    let (ext, paired) = Extractor::load(&dir.join("extractor.ckpt"))?;
    if paired != checksum(&models.embedder.params()) {
        return Err(Error::Checkpoint("extractor was trained with a different embedder".into()));
    }
    models.extractor = ext;
    checkpoint::load_into(&dir.join("critic.ckpt"), CRITIC_KIND, &models.critic.params())?;
    Ok((cfg, models))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::AutoencoderConfig;
    use crate::corpus::SyntheticCorpus;

    pub(crate) fn tiny_setup() -> (WatermarkConfig, Autoencoder<f32>, SyntheticCorpus) {
        let ae = Autoencoder::new(AutoencoderConfig {
            widths: vec![4, 6, 8, 8],
            image_size: 32,
            ..AutoencoderConfig::desk(8)
        })
        .unwrap();
        let cfg = WatermarkConfig {
            k: 8,
            block_size: 2,
            stage_channels: ae.decoder.stage_channels().to_vec(),
            image_size: 32,
            extractor_resolution: 32,
            extractor_width: 8,
            batch_size: 2,
            dataset_size: 6,
            max_steps: 4,
            gate_window: 2,
            learning_rate: 1e-3,
            ..WatermarkConfig::default()
        };
        let corpus = SyntheticCorpus { seed: 0, size: 32, len: 6 };
        (cfg, ae, corpus)
    }

    #[test]
    fn scalar_losses_against_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::<f32>::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f32>::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        assert_eq!(distortion_loss(&a, &a).unwrap(), 0.0);
        let c = a.map(|v| v + 0.1);
        assert!((distortion_loss(&a, &c).unwrap() - 0.01).abs() < 1e-6);
        let mut s = 0.0f64;
        for i in 0..a.numel() {
            s += ((a.data()[i] - b.data()[i]) as f64).powi(2);
        }
        let oracle = s / a.numel() as f64;
        assert!((distortion_loss(&a, &b).unwrap() - oracle).abs() <= 1e-6 * oracle);
        assert!(distortion_loss(&a, &Tensor::zeros(&[1, 3, 4, 4])).is_err());

        let m = BitMessage::random(16, 4);
        let saturated: Vec<f32> = m.bits().iter().map(|&b| if b { 50.0 } else { -50.0 }).collect();
        assert!(extraction_loss(&saturated, &m).unwrap() < 1e-10);
        assert!((extraction_loss(&[0.0; 16], &m).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
        let logits: Vec<f32> = (0..16).map(|i| (i as f32 - 7.5) * 0.37).collect();
        let mut oracle = 0.0f64;
        for (l, t) in logits.iter().zip(m.as_targets()) {
            let p = 1.0 / (1.0 + (-*l as f64).exp());
            oracle -= t as f64 * p.ln() + (1.0 - t as f64) * (1.0 - p).ln();
        }
        oracle /= 16.0;
        assert!((extraction_loss(&logits, &m).unwrap() - oracle).abs() <= 1e-6 * oracle);
        assert!(extraction_loss(&logits[..4], &m).is_err());
    }

    #[test]
    fn composition_identities_are_exact() {
        let cfg = WatermarkConfig::default();
        let b = LossBreakdown::compose(&cfg, 0.3, 0.2, -0.7, 0.1, 0.9);
        assert_eq!(b.l_rec, cfg.lambda_i * b.l_i + cfg.lambda_lpips * b.l_lpips + cfg.lambda_adv * b.l_adv_dw);
        assert_eq!(b.l_total, b.l_rec + cfg.lambda * b.l_ext);
    }

    #[test]
    fn first_step_and_freeze_contract() {
        let (cfg, ae, corpus) = tiny_setup();
        let before = ae.checksum();
        let out = train(&cfg, ae, &corpus, TrainOptions::default()).unwrap();
        let r0 = &out.records[0];
        assert_eq!(r0.l_i, 0.0);
        assert_eq!(r0.l_lpips, 0.0);
        assert!((r0.l_ext - std::f64::consts::LN_2).abs() < 0.1, "{}", r0.l_ext);
        assert_eq!(out.models.autoencoder.checksum(), before);
        for r in &out.records {
            let b = LossBreakdown::compose(&cfg, r.l_i, r.l_lpips, r.l_adv_dw, r.l_adv_c, r.l_ext);
            assert_eq!(b.l_total, r.l_total);
        }
    }

    #[test]
    fn every_module_receives_gradient() {
        let (cfg, ae, corpus) = tiny_setup();
        let models = WatermarkModels::new(ae, &cfg).unwrap();
        let cache = LatentCache::build(&models.autoencoder, &corpus).unwrap();
        let msgs = vec![BitMessage::random(8, 1), BitMessage::random(8, 2)];
        let z = Tensor::stack(&cache.latents[..2]);
        let x = Tensor::stack(&cache.decoded[..2]);
        let tape = Tape::new();
        let pass = generator_pass(&models, &cfg, &tape, &z, &x, &msgs, &AttackSpec::identity()).unwrap();
        let g = tape.backward(pass.l_total);
        for m in &models.embedder.modules {
            let nonzero = m.params().iter().any(|p| g.param(p).is_some_and(|t| t.max_abs() > 0.0));
            assert!(nonzero, "module {} got no gradient", m.stage_index());
        }
        for p in models.autoencoder.params() {
            assert!(g.param(&p).is_none());
        }
    }

    #[test]
    fn run_directory_round_trip_and_log() {
        let (cfg, ae, corpus) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let out = train(
            &cfg,
            ae,
            &corpus,
            TrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                progress: None,
            },
        )
        .unwrap();
        let (cfg2, back) = load_run(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(checksum(&back.embedder.params()), checksum(&out.models.embedder.params()));
        let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let steps: Vec<StepRecord> = log.lines().filter_map(|l| serde_json::from_str(l).ok()).collect();
        assert_eq!(steps.len(), cfg.max_steps);
        assert!(log.contains("\"epoch\""));
    }

    #[test]
    fn validation_errors() {
        let (cfg, ae, corpus) = tiny_setup();
        let bad = WatermarkConfig {
            stage_channels: vec![1, 2],
            ..cfg.clone()
        };
        assert!(matches!(train(&bad, ae.clone(), &corpus, TrainOptions::default()), Err(Error::Config(_))));
        let empty: Vec<crate::grid::ImageGrid> = Vec::new();
        assert!(matches!(train(&cfg, ae.clone(), &empty, TrainOptions::default()), Err(Error::Empty(_))));
        let wrong_size = SyntheticCorpus { size: 16, ..corpus };
        assert!(train(&cfg, ae, &wrong_size, TrainOptions::default()).is_err());
    }

    #[test]
    fn attacks_wait_for_the_gate() {
        let (cfg, ae, corpus) = tiny_setup();
        let closed = WatermarkConfig {
            attack_threshold: 0.999,
            max_steps: 6,
            ..cfg.clone()
        };
        let out = train(&closed, ae.clone(), &corpus, TrainOptions::default()).unwrap();
        assert!(out.gate_opened_at.is_none());
        assert!(out.records.iter().all(|r| !r.attack_active && r.attack.starts_with("identity")));

        let open = WatermarkConfig {
            attack_threshold: 0.0,
            max_steps: 6,
            ..cfg
        };
        let ae_copy = ae.clone();
        let out = train(&open, ae, &corpus, TrainOptions::default()).unwrap();
        let at = out.gate_opened_at.unwrap();
        assert_eq!(at, open.gate_window);
        assert!(out.records[..at].iter().all(|r| !r.attack_active));
        assert!(out.records[at..].iter().all(|r| r.attack_active));

        let reenc = WatermarkConfig {
            reencode_prob: 1.0,
            ..open
        };
        let out = train(&reenc, ae_copy, &corpus, TrainOptions::default()).unwrap();
        let at = out.gate_opened_at.unwrap();
        assert!(out.records[..at].iter().all(|r| r.attack.starts_with("identity")));
        assert!(out.records[at..].iter().all(|r| r.attack.starts_with("reencode")));
    }

    #[test]
    fn reencode_attack_is_the_autoencoder_round_trip() {
        let (cfg, ae, _) = tiny_setup();
        let models = WatermarkModels::new(ae, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for p in models.embedder.params() {
            p.set(Tensor::randn(&p.shape(), 0.1, &mut rng));
        }
        let imgs: Vec<_> = (0..2).map(|i| crate::dataset::synthetic_image(i, 32)).collect();
        let z = models.autoencoder.encode_batch(&images_to_batch(&imgs).unwrap()).unwrap();
        let x_hat = models.autoencoder.decode_batch(&z).unwrap();
        let msgs: Vec<_> = (0..2).map(|i| BitMessage::random(cfg.k, i)).collect();
        let tape = Tape::new();
        let pass = generator_pass(&models, &cfg, &tape, &z, &x_hat, &msgs, &AttackSpec::new(AttackKind::Reencode, 0.0)).unwrap();
        let xw = pass.watermarked.value().map(|v| v.clamp(-1.0, 1.0));
        let attacked = models.autoencoder.decode_batch(&models.autoencoder.encode_batch(&xw).unwrap()).unwrap();
        let expect = models.extractor.logits_batch(&attacked).unwrap();
        assert_eq!(pass.logits.value().data(), expect.data());
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        let ae = Autoencoder::<f64>::new(AutoencoderConfig {
            widths: vec![3, 4, 4, 4],
            image_size: 64,
            ..AutoencoderConfig::desk(8)
        })
        .unwrap();
        let cfg = WatermarkConfig {
            k: 4,
            block_size: 2,
            stage_channels: ae.decoder.stage_channels().to_vec(),
            image_size: 64,
            extractor_resolution: 16,
            extractor_width: 4,
            lambda_adv: 0.5,
            ..WatermarkConfig::default()
        };
        let models = WatermarkModels::new(ae, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in models.embedder.params() {
            p.set(Tensor::randn(&p.shape(), 0.2, &mut rng));
        }
        let z = Tensor::<f64>::randn(&[1, 4, 8, 8], 1.0, &mut rng);
        let x_hat = models.autoencoder.decode_batch(&z).unwrap();
        let msgs = vec![BitMessage::random(4, 3)];
        let attack = AttackSpec::new(crate::attacks::AttackKind::Blur, 3.0);
        let loss = |m: &WatermarkModels<f64>| {
            let tape = Tape::new();
            let p = generator_pass(m, &cfg, &tape, &z, &x_hat, &msgs, &attack).unwrap();
            p.l_total.value().data()[0]
        };
        let tape = Tape::new();
        let pass = generator_pass(&models, &cfg, &tape, &z, &x_hat, &msgs, &attack).unwrap();
        let grads = tape.backward(pass.l_total);
        let mut checked = 0;
        for p in models.embedder.params().into_iter().chain(models.extractor.params()) {
            let g = grads.param(&p).cloned().unwrap();
            for idx in [0, p.value().numel() / 2, p.value().numel() - 1] {
                let h = 1e-5;
                let orig = p.value();
                let mut up = orig.clone();
                up.data_mut()[idx] += h;
                p.set(up);
                let lp = loss(&models);
                let mut dn = orig.clone();
                dn.data_mut()[idx] -= h;
                p.set(dn);
                let lm = loss(&models);
                p.set(orig);
                let fd = (lp - lm) / (2.0 * h);
                let an = g.data()[idx];
                assert!(
                    (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-4),
                    "{} [{idx}]: analytic {an} vs numeric {fd}",
                    p.name()
                );
                checked += 1;
            }
        }
        assert!(checked >= 20, "{checked}");
    }
}
