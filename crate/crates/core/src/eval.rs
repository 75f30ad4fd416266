//! Evaluation tables over attack presets, and run manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{apply_attack_batch, reencode_batch, AttackKind, AttackPreset};
use crate::autoencoder::Autoencoder;
use crate::config::WatermarkConfig;
use crate::corpus::ImageCorpus;
use crate::embedder::residual_mask_batch;
use crate::error::{Error, Result};
use crate::grid::{batch_to_images, images_to_batch};
use crate::matching::fpr_detection;
use crate::message::BitMessage;
use crate::metrics::{bit_accuracy, psnr, ssim};
use crate::nn::{Module, Tape, Tensor};
use crate::trainer::WatermarkModels;

/// Where the watermark enters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Decode the latent of each corpus image with the watermark; quality vs. `D(z)`.
    InGeneration,
    /// Add the residual mask to the corpus image itself; quality vs. the cover.
    PostGeneration,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::InGeneration => "in-gen",
            EvalMode::PostGeneration => "post-gen",
        })
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in-gen" | "in-generation" => Ok(EvalMode::InGeneration),
            "post-gen" | "post-generation" => Ok(EvalMode::PostGeneration),
            _ => Err(Error::invalid(format!("unknown eval mode {s:?} (in-gen, post-gen)"))),
        }
    }
}

/// One attack's result. Quality fields are present only for clean pairs and
/// for the re-encode row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub attack: String,
    pub bit_accuracy: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub perceptual: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub messages_per_image: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: EvalMode::InGeneration,
            messages_per_image: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub images: usize,
    pub messages_per_image: usize,
    /// Clean-pair quality and accuracy.
    pub quality: EvalRow,
    /// One row per preset, in preset order.
    pub rows: Vec<EvalRow>,
    /// Re-encode row, when an attacker autoencoder was supplied.
    pub reencode: Option<EvalRow>,
}

impl EvalReport {
    pub fn accuracy(&self, attack: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.attack == attack).map(|r| r.bit_accuracy)
    }

    /// Wide tab-separated table: preset columns in order, then quality columns.
    pub fn to_tsv(&self) -> String {
        let mut head = vec!["mode".to_string()];
        let mut row = vec![self.mode.to_string()];
        for r in &self.rows {
            head.push(r.attack.clone());
            row.push(format!("{:.4}", r.bit_accuracy));
        }
        if let Some(r) = &self.reencode {
            head.push(r.attack.clone());
            row.push(format!("{:.4}", r.bit_accuracy));
        }
        let q = &self.quality;
        for (name, v) in [("PSNR", q.psnr), ("SSIM", q.ssim), ("perceptual", q.perceptual)] {
            head.push(name.into());
            row.push(v.map_or("-".into(), |v| format!("{v:.4}")));
        }
        format!("{}\n{}\n", head.join("\t"), row.join("\t"))
    }
}

#[derive(Default)]
struct Acc {
    sum: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n.max(1) as f64
    }
}

/// Message `j` of image `i`; stable across runs and modes.
pub fn eval_message(k: usize, seed: u64, image: usize, j: usize) -> BitMessage {
    BitMessage::random(k, seed.wrapping_mul(0x9e37_79b9).wrapping_add((image as u64) << 20 | j as u64))
}

fn mean_accuracy(extracted: &[BitMessage], truth: &[BitMessage], acc: &mut Acc) -> Result<()> {
    for (e, t) in extracted.iter().zip(truth) {
        acc.push(bit_accuracy(e, t)?);
    }
    Ok(())
}

/// Watermarks every corpus image with `messages_per_image` messages, attacks
/// each result with every preset and reports mean bit accuracy per preset.
pub fn evaluate(
    models: &WatermarkModels<f32>,
    corpus: &dyn ImageCorpus,
    presets: &[AttackPreset],
    attacker: Option<&Autoencoder<f32>>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    if opts.messages_per_image == 0 {
        return Err(Error::Config("messages_per_image must be positive".into()));
    }
    let k = models.embedder.message_len();
    if models.extractor.message_len() != k {
        return Err(Error::Config(format!(
            "embedder writes {k} bits but the extractor reads {}",
            models.extractor.message_len()
        )));
    }
    for p in presets {
        p.spec.validate()?;
    }
    let ae = &models.autoencoder;
    let mut per_attack: Vec<Acc> = presets.iter().map(|_| Acc::default()).collect();
    let (mut q_psnr, mut q_ssim, mut q_lp) = (Acc::default(), Acc::default(), Acc::default());
    let (mut re_acc, mut re_psnr) = (Acc::default(), Acc::default());

    for i in 0..corpus.len() {
        let img = corpus.get(i);
        let msgs: Vec<BitMessage> = (0..opts.messages_per_image).map(|j| eval_message(k, opts.seed, i, j)).collect();
        let cover = images_to_batch::<f32>(std::slice::from_ref(&img))?;
        let covers = Tensor::stack(&vec![cover.batch_item(0); msgs.len()]);
        let (marked, reference) = match opts.mode {
            EvalMode::InGeneration => {
                let z = ae.encode_batch(&covers)?;
                (models.embedder.decode_batch(ae, &z, &msgs)?, ae.decode_batch(&z)?)
            }
            EvalMode::PostGeneration => {
                let mask = residual_mask_batch(&models.embedder, ae, &covers, &msgs)?;
                (covers.zip_map(&mask, |a, b| a + b), covers.clone())
            }
        };
        let marked = marked.map(|v| v.clamp(-1.0, 1.0));
        let reference = reference.map(|v| v.clamp(-1.0, 1.0));
        let marked_imgs = batch_to_images(&marked, None);
        for (a, b) in marked_imgs.iter().zip(batch_to_images(&reference, None)) {
            q_psnr.push(psnr(a, &b)?);
            q_ssim.push(ssim(a, &b)?);
        }
        let tape = Tape::new();
        let lp = models.perceptual.loss(tape.constant(marked.clone()), tape.constant(reference))?;
        q_lp.push(lp.value().data()[0] as f64);

        for (p, acc) in presets.iter().zip(per_attack.iter_mut()) {
            let spec = p.spec.clone().with_seed(opts.seed ^ (i as u64).wrapping_mul(0x2545_f491));
            let attacked = if spec.kind == AttackKind::Reencode {
                reencode_batch(attacker.unwrap_or(ae), &marked)?
            } else {
                apply_attack_batch(&spec, &marked)?
            };
            mean_accuracy(&models.extractor.extract_batch(&attacked)?, &msgs, acc)?;
        }
        if let Some(att) = attacker {
            let attacked = reencode_batch(att, &marked)?;
            mean_accuracy(&models.extractor.extract_batch(&attacked)?, &msgs, &mut re_acc)?;
            for (a, b) in batch_to_images(&attacked, None).iter().zip(&marked_imgs) {
                re_psnr.push(psnr(a, b)?);
            }
        }
    }

    let clean = presets
        .iter()
        .zip(&per_attack)
        .find(|(p, _)| p.spec.kind == AttackKind::Identity)
        .map(|(_, a)| a.mean());
    let rows = presets
        .iter()
        .zip(&per_attack)
        .map(|(p, a)| {
            let quality = p.spec.kind == AttackKind::Identity;
            EvalRow {
                attack: p.name.clone(),
                bit_accuracy: a.mean(),
                psnr: quality.then(|| q_psnr.mean()),
                ssim: quality.then(|| q_ssim.mean()),
                perceptual: quality.then(|| q_lp.mean()),
            }
        })
        .collect();
    Ok(EvalReport {
        mode: opts.mode,
        images: corpus.len(),
        messages_per_image: opts.messages_per_image,
        quality: EvalRow {
            attack: "clean".into(),
            bit_accuracy: clean.unwrap_or(f64::NAN),
            psnr: Some(q_psnr.mean()),
            ssim: Some(q_ssim.mean()),
            perceptual: Some(q_lp.mean()),
        },
        rows,
        reencode: attacker.map(|_| EvalRow {
            attack: "Re-encode".into(),
            bit_accuracy: re_acc.mean(),
            psnr: Some(re_psnr.mean()),
            ssim: None,
            perceptual: None,
        }),
    })
}

/// `(n, FPR_det)` for every `n` in `n_min..=n_max`.
pub fn fpr_table(k: usize, n_min: usize, n_max: usize) -> Result<Vec<(usize, f64)>> {
    if n_min > n_max || n_max > k {
        return Err(Error::invalid(format!("need n_min <= n_max <= k, got {n_min}, {n_max}, {k}")));
    }
    (n_min..=n_max).map(|n| Ok((n, fpr_detection(n, k)?))).collect()
}

/// Everything needed to replay a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: WatermarkConfig,
    /// Checkpoint file name to weight checksum.
    pub checkpoints: BTreeMap<String, String>,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, config: &WatermarkConfig) -> Self {
        Self {
            command: command.into(),
            args,
            seed: config.seed,
            config: config.clone(),
            checkpoints: BTreeMap::new(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn record_models(&mut self, models: &WatermarkModels<f32>) {
        self.checkpoints.insert("autoencoder".into(), models.autoencoder.checksum());
        self.checkpoints
            .insert("embedder".into(), crate::nn::checksum(&models.embedder.params()));
        self.checkpoints
            .insert("extractor".into(), crate::nn::checksum(&models.extractor.params()));
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("manifest: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::default_presets;
    use crate::autoencoder::AutoencoderConfig;
    use crate::corpus::HeldoutCorpus;

    fn tiny_models() -> WatermarkModels<f32> {
        let ae = Autoencoder::new(AutoencoderConfig {
            widths: vec![4, 6, 8, 8],
            image_size: 32,
            ..AutoencoderConfig::desk(8)
        })
        .unwrap();
        let cfg = WatermarkConfig {
            k: 16,
            block_size: 2,
            stage_channels: ae.decoder.stage_channels().to_vec(),
            image_size: 32,
            extractor_resolution: 32,
            extractor_width: 8,
            ..WatermarkConfig::default()
        };
        WatermarkModels::new(ae, &cfg).unwrap()
    }

    #[test]
    fn untrained_system_is_at_chance_and_reproducible() {
        let models = tiny_models();
        let corpus = HeldoutCorpus { size: 32, len: 6 };
        let presets = default_presets();
        let opts = EvalOptions::default();
        let a = evaluate(&models, &corpus, &presets, Some(&models.autoencoder), &opts).unwrap();
        let b = evaluate(&models, &corpus, &presets, Some(&models.autoencoder), &opts).unwrap();
        assert_eq!(a.to_tsv(), b.to_tsv());
        assert_eq!(a.rows.len(), presets.len());
        for (r, p) in a.rows.iter().zip(&presets) {
            assert_eq!(r.attack, p.name);
            assert!((0.0..=1.0).contains(&r.bit_accuracy));
        }
        let clean = a.accuracy("None").unwrap();
        assert!((0.35..=0.65).contains(&clean), "{clean}");
        // zero-init modules: the watermarked decode is the plain decode
        assert_eq!(a.quality.psnr, Some(crate::metrics::PSNR_CAP_DB));
        assert_eq!(a.quality.perceptual, Some(0.0));
        let header = a.to_tsv().lines().next().unwrap().to_string();
        let cols: Vec<&str> = header.split('\t').collect();
        let names: Vec<&str> = presets.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(&cols[1..=names.len()], names.as_slice());
    }

    #[test]
    fn post_generation_reference_is_the_cover() {
        let models = tiny_models();
        let corpus = HeldoutCorpus { size: 32, len: 2 };
        let presets = vec![AttackPreset::new("None", AttackKind::Identity, 0.0)];
        let opts = EvalOptions {
            mode: EvalMode::PostGeneration,
            messages_per_image: 3,
            seed: 4,
        };
        let r = evaluate(&models, &corpus, &presets, None, &opts).unwrap();
        assert_eq!(r.quality.psnr, Some(crate::metrics::PSNR_CAP_DB));
        assert!(r.reencode.is_none());
        assert_eq!(r.images * r.messages_per_image, 6);
    }

    #[test]
    fn mismatched_models_and_empty_inputs_fail() {
        let mut models = tiny_models();
        let corpus = HeldoutCorpus { size: 32, len: 1 };
        let presets = default_presets();
        let empty: Vec<crate::grid::ImageGrid> = Vec::new();
        assert!(evaluate(&models, &empty, &presets, None, &EvalOptions::default()).is_err());
        models.extractor = crate::extractor::Extractor::new(8, 32, 8, 0).unwrap();
        assert!(matches!(
            evaluate(&models, &corpus, &presets, None, &EvalOptions::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fpr_table_rows_match_the_tail() {
        let t = fpr_table(48, 25, 48).unwrap();
        assert_eq!(t.len(), 24);
        for (n, f) in &t {
            assert_eq!(*f, fpr_detection(*n, 48).unwrap());
        }
        assert!(t.windows(2).all(|w| w[0].1 > w[1].1));
        assert!(fpr_table(48, 30, 49).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let models = tiny_models();
        let mut m = RunManifest::new("eval", vec!["--seed".into(), "3".into()], &WatermarkConfig::default());
        m.record_models(&models);
        let dir = tempfile::tempdir().unwrap();
        m.write(dir.path()).unwrap();
        assert_eq!(RunManifest::read(dir.path()).unwrap(), m);
        assert_eq!(m.checkpoints.len(), 3);
    }

    #[test]
    fn mode_parsing() {
        for m in [EvalMode::InGeneration, EvalMode::PostGeneration] {
            assert_eq!(m.to_string().parse::<EvalMode>().unwrap(), m);
        }
        assert!("both".parse::<EvalMode>().is_err());
    }
}
