use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use latentmark::attacks::{apply_attack, default_presets, read_presets, reencode_attack, sweep_presets, AttackKind, AttackSpec};
use latentmark::autoencoder::{pretrain_reference_autoencoder, default_corpus, Autoencoder, AutoencoderConfig};
use latentmark::corpus::{HeldoutCorpus, SyntheticCorpus};
use latentmark::embedder::{decode_watermarked, watermark_cover_image};
use latentmark::eval::{evaluate, fpr_table, EvalMode, EvalOptions, RunManifest};
use latentmark::matching::{attribute, detect, simulate_attribution, solve_threshold, UserRegistry};
use latentmark::message::read_message_file;
use latentmark::metrics::psnr;
use latentmark::trainer::{load_run, train, TrainOptions, WatermarkModels};
use latentmark::{BitMessage, Error, ImageGrid, WatermarkConfig};

use crate::Global;

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::Invalid(msg.into()).into()
}

pub fn load_config(g: &Global) -> Result<WatermarkConfig> {
    let mut cfg = match &g.config {
        Some(p) => WatermarkConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => WatermarkConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn out_dir(g: &Global, command: &str) -> Result<PathBuf> {
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn open_run(g: &Global, run: &Path) -> Result<(WatermarkConfig, WatermarkModels<f32>)> {
    let (mut cfg, models) = load_run(run).with_context(|| format!("loading run {}", run.display()))?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok((cfg, models))
}

fn manifest(dir: &Path, command: &str, argv: Vec<String>, cfg: &WatermarkConfig, models: Option<&WatermarkModels<f32>>) -> Result<()> {
    let mut m = RunManifest::new(command, argv, cfg);
    if let Some(models) = models {
        m.record_models(models);
    }
    m.write(dir)?;
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn load_image(p: &Path) -> Result<ImageGrid> {
    ImageGrid::load(p).with_context(|| format!("reading image {}", p.display()))
}

fn parse_message(hex: &str, k: usize) -> Result<BitMessage> {
    Ok(BitMessage::from_hex(hex, k)?)
}

fn threshold(n: Option<usize>, fpr: f64, users: u64, k: usize) -> Result<usize> {
    match n {
        Some(n) if n > k => Err(invalid(format!("threshold {n} exceeds k = {k}"))),
        Some(n) => Ok(n),
        None => Ok(solve_threshold(fpr, users, k)?),
    }
}

#[derive(Args, Debug)]
pub struct PretrainAe {
    /// Spatial downsampling factor f.
    #[arg(long, default_value_t = 8)]
    factor: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

impl PretrainAe {
    pub fn run(self, g: &Global, argv: Vec<String>) -> Result<()> {
        let base = load_config(g)?;
        let mut ae_cfg = AutoencoderConfig {
            seed: base.seed,
            ..AutoencoderConfig::desk(self.factor)
        };
        if let Some(s) = self.steps {
            ae_cfg.steps = s;
        }
        if let Some(s) = self.image_size {
            ae_cfg.image_size = s;
        }
        if let Some(lr) = self.learning_rate {
            ae_cfg.learning_rate = lr;
        }
        ae_cfg.validate()?;
        let dir = out_dir(g, "pretrain-ae")?;
        let mut log = fs::File::create(dir.join("metrics.jsonl"))?;
        let corpus = default_corpus(&ae_cfg);
        let (ae, report) = pretrain_reference_autoencoder(&ae_cfg, &corpus, |step, loss| {
            let _ = writeln!(log, "{}", serde_json::json!({ "step": step, "loss": loss }));
            if step % 100 == 0 {
                eprintln!("step {step} loss {loss:.5}");
            }
        })?;
        ae.save(&dir.join("autoencoder.ckpt"))?;
        // a watermarking config that fits this autoencoder
        let cfg = WatermarkConfig {
            stage_channels: ae.decoder.stage_channels().to_vec(),
            downsample_factor: self.factor,
            image_size: ae_cfg.image_size,
            ..base
        };
        cfg.save(&dir.join("config.toml"))?;
        write_json(
            &dir.join("report.json"),
            &serde_json::json!({ "final_loss": report.final_loss, "heldout_psnr": report.heldout_psnr, "checksum": ae.checksum() }),
        )?;
        let mut m = RunManifest::new("pretrain-ae", argv, &cfg);
        m.checkpoints.insert("autoencoder".into(), ae.checksum());
        m.write(&dir)?;
        println!("held-out PSNR {:.2} dB", report.heldout_psnr);
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Train {
    /// Pretrained autoencoder checkpoint.
    #[arg(long)]
    autoencoder: PathBuf,
}

impl Train {
    pub fn run(self, g: &Global, argv: Vec<String>) -> Result<()> {
        let cfg = load_config(g)?;
        let ae = Autoencoder::load(&self.autoencoder)?;
        let dir = out_dir(g, "train")?;
        let corpus = SyntheticCorpus {
            seed: cfg.seed,
            size: cfg.image_size,
            len: cfg.dataset_size,
        };
        let out = train(
            &cfg,
            ae,
            &corpus,
            TrainOptions {
                out_dir: Some(dir.clone()),
                progress: Some(Box::new(|r| {
                    if r.step % 50 == 0 {
                        eprintln!("step {} total {:.4} ext {:.4} acc {:.3} {}", r.step, r.l_total, r.l_ext, r.bit_acc, r.attack);
                    }
                })),
            },
        )?;
        manifest(&dir, "train", argv, &cfg, Some(&out.models))?;
        if let Some(s) = out.gate_opened_at {
            println!("attacks enabled at step {s}");
        }
        println!("trained {} steps into {}", out.records.len(), dir.display());
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Embed {
    /// Training run directory.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Message as hex.
    #[arg(long)]
    message: String,
    #[arg(long)]
    output: PathBuf,
}

impl Embed {
    pub fn run(self, g: &Global, argv: Vec<String>) -> Result<()> {
        let (cfg, models) = open_run(g, &self.run)?;
        let m = parse_message(&self.message, cfg.k)?;
        let cover = load_image(&self.input)?;
        let out = watermark_cover_image(&models.embedder, &models.autoencoder, &cover, &m)?;
        out.save_png(&self.output)?;
        let dir = out_dir(g, "embed")?;
        let q = psnr(&out, &cover)?;
        write_json(&dir.join("embed.json"), &serde_json::json!({ "message": m.to_hex(), "psnr": q, "output": self.output }))?;
        manifest(&dir, "embed", argv, &cfg, Some(&models))?;
        println!("PSNR vs cover {q:.2} dB");
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Generate {
    #[arg(long)]
    run: PathBuf,
    /// Image whose latent is decoded; a held-out procedural image otherwise.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Held-out image index used without --input.
    #[arg(long, default_value_t = 0)]
    index: u64,
    #[arg(long)]
    message: String,
    #[arg(long)]
    output: PathBuf,
}

impl Generate {
    pub fn run(self, g: &Global, argv: Vec<String>) -> Result<()> {
        let (cfg, models) = open_run(g, &self.run)?;
        let m = parse_message(&self.message, cfg.k)?;
        let src = match &self.input {
            Some(p) => load_image(p)?,
            None => latentmark::dataset::heldout_image(self.index, cfg.image_size),
        };
        let z = models.autoencoder.encode(&src)?;
        let plain = models.autoencoder.decode(&z)?;
        let out = decode_watermarked(&models.embedder, &models.autoencoder, &z, &m)?;
        out.save_png(&self.output)?;
        let dir = out_dir(g, "generate")?;
        let q = psnr(&out, &plain)?;
        write_json(&dir.join("generate.json"), &serde_json::json!({ "message": m.to_hex(), "psnr": q, "output": self.output }))?;
        manifest(&dir, "generate", argv, &cfg, Some(&models))?;
        println!("PSNR vs plain decode {q:.2} dB");
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Extract {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    input: PathBuf,
}

impl Extract {
    pub fn run(self, g: &Global, argv: Vec<String>) -> Result<()> {
        let (cfg, models) = open_run(g, &self.run)?;
        let img = load_image(&self.input)?;
        let logits = models.extractor.extract_logits(&img)?;
        let m = BitMessage::from_logits(&logits)?;
        let dir = out_dir(g, "extract")?;
        write_json(&dir.join("extract.json"), &serde_json::json!({ "message": m.to_hex(), "logits": logits }))?;
        manifest(&dir, "extract", argv, &cfg, Some(&models))?;
        println!("{}", m.to_hex());
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Detect {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Registered message as hex.
    #[arg(long)]
    message: String,
    /// Match threshold; solved from --fpr when omitted.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 1e-6)]
    fpr: f64,
}

impl Detect {
    pub fn run(self, g: &Global, argv: Vec<String>) -> Result<()> {
        let (cfg, models) = open_run(g, &self.run)?;
        let reference = parse_message(&self.message, cfg.k)?;
        let n = threshold(self.n, self.fpr, 1, cfg.k)?;
        let extracted = models.extractor.extract_message(&load_image(&self.input)?)?;
        let report = detect(&extracted, &reference, n)?;
        let dir = out_dir(g, "detect")?;
        write_json(&dir.join("detect.json"), &report)?;
        manifest(&dir, "detect", argv, &cfg, Some(&models))?;
        println!("{}", serde_json::to_string(&report)?);
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Attribute {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Registry file of `user_id<TAB>hex` lines.
    #[arg(long)]
    users: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    /// Target attribution FPR over the whole registry.
    #[arg(long, default_value_t = 1e-6)]
    fpr: f64,
}

impl Attribute {
    pub fn run(self, g: &Global, argv: Vec<String>) -> Result<()> {
        let (cfg, models) = open_run(g, &self.run)?;
        let registry = UserRegistry::from_records(read_message_file(&self.users, cfg.k)?)?;
        let n = threshold(self.n, self.fpr, registry.len() as u64, cfg.k)?;
        let extracted = models.extractor.extract_message(&load_image(&self.input)?)?;
        let report = attribute(&extracted, &registry, n)?;
        let dir = out_dir(g, "attribute")?;
        write_json(&dir.join("attribute.json"), &report)?;
        manifest(&dir, "attribute", argv, &cfg, Some(&models))?;
        println!("{}", serde_json::to_string(&report)?);
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Attack {
    #[arg(long)]
    input: PathBuf,
    /// Attack kind, or `reencode` together with --autoencoder.
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 0.0)]
    param: f64,
    #[arg(long)]
    autoencoder: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

impl Attack {
    pub fn run(self, g: &Global, argv: Vec<String>) -> Result<()> {
        let cfg = load_config(g)?;
        let img = load_image(&self.input)?;
        let out = if self.kind == "reencode" {
            let p = self.autoencoder.as_ref().ok_or_else(|| invalid("reencode needs --autoencoder"))?;
            reencode_attack(&Autoencoder::load(p)?, &img)?
        } else {
            let kind: AttackKind = self.kind.parse()?;
            let spec = AttackSpec::new(kind, self.param).with_seed(cfg.seed);
            spec.validate()?;
            apply_attack(&spec, &img)?
        };
        out.save_png(&self.output)?;
        let dir = out_dir(g, "attack")?;
        manifest(&dir, "attack", argv, &cfg, None)?;
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Eval {
    #[arg(long)]
    run: PathBuf,
    /// Preset file of `name<TAB>kind<TAB>param` lines; the main table otherwise.
    #[arg(long)]
    presets: Option<PathBuf>,
    /// Use the strength-sweep presets instead of the main table.
    #[arg(long, conflicts_with = "presets")]
    sweep: bool,
    /// Number of held-out images.
    #[arg(long, default_value_t = 32)]
    images: usize,
    #[arg(long, default_value_t = 10)]
    messages: usize,
    #[arg(long, default_value = "in-gen")]
    mode: EvalMode,
    /// Also re-encode through the run's own autoencoder.
    #[arg(long)]
    reencode: bool,
}

impl Eval {
    pub fn run(self, g: &Global, argv: Vec<String>) -> Result<()> {
        let (cfg, models) = open_run(g, &self.run)?;
        let presets = match (&self.presets, self.sweep) {
            (Some(p), _) => read_presets(p)?,
            (None, true) => sweep_presets(),
            (None, false) => default_presets(),
        };
        let corpus = HeldoutCorpus {
            size: cfg.image_size,
            len: self.images,
        };
        let opts = EvalOptions {
            mode: self.mode,
            messages_per_image: self.messages,
            seed: cfg.seed,
        };
        let attacker = self.reencode.then_some(&models.autoencoder);
        let report = evaluate(&models, &corpus, &presets, attacker, &opts)?;
        let dir = out_dir(g, "eval")?;
        fs::write(dir.join("eval.tsv"), report.to_tsv())?;
        write_json(&dir.join("eval.json"), &report)?;
        manifest(&dir, "eval", argv, &cfg, Some(&models))?;
        print!("{}", report.to_tsv());
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct FprTable {
    #[arg(long, default_value_t = 48)]
    k: usize,
    #[arg(long)]
    n_min: usize,
    #[arg(long)]
    n_max: usize,
}

impl FprTable {
    pub fn run(self, g: &Global, argv: Vec<String>) -> Result<()> {
        let cfg = load_config(g)?;
        let rows = fpr_table(self.k, self.n_min, self.n_max)?;
        let mut text = String::from("n\tfpr_det\n");
        for (n, f) in &rows {
            text.push_str(&format!("{n}\t{f:e}\n"));
        }
        let dir = out_dir(g, "fpr-table")?;
        fs::write(dir.join("fpr_table.tsv"), &text)?;
        manifest(&dir, "fpr-table", argv, &cfg, None)?;
        print!("{text}");
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct SimulateAttribution {
    #[arg(long, default_value_t = 10_000)]
    users: usize,
    #[arg(long, default_value_t = 2)]
    per_user: usize,
    /// Independent bit-flip probability of the simulated extraction.
    #[arg(long, default_value_t = 0.0)]
    flip: f64,
    #[arg(long, default_value_t = 1e-6)]
    fpr: f64,
    #[arg(long, default_value_t = 48)]
    k: usize,
}

impl SimulateAttribution {
    pub fn run(self, g: &Global, argv: Vec<String>) -> Result<()> {
        let cfg = load_config(g)?;
        let out = simulate_attribution(self.users, self.per_user, self.flip, self.fpr, self.k, cfg.seed)?;
        let dir = out_dir(g, "simulate-attribution")?;
        write_json(&dir.join("attribution.json"), &out)?;
        manifest(&dir, "simulate-attribution", argv, &cfg, None)?;
        println!("{}", serde_json::to_string(&out)?);
        Ok(())
    }
}
