//! Image attacks: differentiable batch transforms, the training sampler,
//! named evaluation presets, and the re-encode attack.
//!
//! Parameters follow the training ranges: crop and resize as area fractions,
//! rotation in degrees (either sign), brightness/contrast as factors, noise as
//! a standard deviation on the `[0, 1]` scale, blur as an odd kernel size and
//! JPEG as a quality level.

use std::fmt;
use std::io::Cursor;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::error::{Error, Result};
use crate::grid::{images_to_batch, ImageGrid, ImageSource};
use crate::nn::{Real, SpatialMap, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Identity,
    CenterCrop,
    RandomCrop,
    Rotation,
    Resize,
    Brightness,
    Contrast,
    GaussianNoise,
    Blur,
    Jpeg,
    Combined,
    Reencode,
}

impl AttackKind {
    /// The kinds drawn by the training sampler.
    pub const TRAINING: [AttackKind; 10] = [
        AttackKind::CenterCrop,
        AttackKind::RandomCrop,
        AttackKind::Rotation,
        AttackKind::Resize,
        AttackKind::Brightness,
        AttackKind::GaussianNoise,
        AttackKind::Blur,
        AttackKind::Contrast,
        AttackKind::Jpeg,
        AttackKind::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Identity => "identity",
            AttackKind::CenterCrop => "center_crop",
            AttackKind::RandomCrop => "random_crop",
            AttackKind::Rotation => "rotation",
            AttackKind::Resize => "resize",
            AttackKind::Brightness => "brightness",
            AttackKind::Contrast => "contrast",
            AttackKind::GaussianNoise => "gaussian_noise",
            AttackKind::Blur => "blur",
            AttackKind::Jpeg => "jpeg",
            AttackKind::Combined => "combined",
            AttackKind::Reencode => "reencode",
        }
    }

    /// Inclusive legal parameter range, or `None` for parameterless kinds.
    pub fn range(self) -> Option<(f64, f64)> {
        match self {
            AttackKind::CenterCrop | AttackKind::RandomCrop => Some((0.08, 0.95)),
            AttackKind::Rotation => Some((2.0, 46.0)),
            AttackKind::Resize => Some((0.5, 1.5)),
            AttackKind::Brightness | AttackKind::Contrast => Some((0.0, 3.0)),
            AttackKind::GaussianNoise => Some((0.0, 0.05)),
            AttackKind::Blur => Some((3.0, 19.0)),
            AttackKind::Jpeg => Some((40.0, 100.0)),
            AttackKind::Identity | AttackKind::Combined | AttackKind::Reencode => None,
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::TRAINING
            .iter()
            .chain(&[AttackKind::Combined, AttackKind::Reencode])
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown attack kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub param: f64,
    /// Drives random crop placement and noise.
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, param: f64) -> Self {
        Self { kind, param, seed: 0 }
    }

    pub fn identity() -> Self {
        Self::new(AttackKind::Identity, 0.0)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Checks the parameter against the kind's range. Rotation accepts
    /// either sign; blur needs an odd integer and JPEG an integer.
    pub fn validate(&self) -> Result<()> {
        let Some((lo, hi)) = self.kind.range() else {
            return Ok(());
        };
        let p = if self.kind == AttackKind::Rotation {
            self.param.abs()
        } else {
            self.param
        };
        let integral = matches!(self.kind, AttackKind::Blur | AttackKind::Jpeg);
        let odd_ok = self.kind != AttackKind::Blur || (p.fract() == 0.0 && p as i64 % 2 == 1);
        if !p.is_finite() || p < lo || p > hi || (integral && p.fract() != 0.0) || !odd_ok {
            return Err(Error::AttackRange {
                kind: self.kind.name(),
                value: self.param,
                lo,
                hi,
            });
        }
        Ok(())
    }
}

/// Output height/width of `spec` applied to an `h × w` image.
pub fn output_size(spec: &AttackSpec, h: usize, w: usize) -> (usize, usize) {
    if spec.kind == AttackKind::Resize {
        let s = spec.param.sqrt();
        (
            ((h as f64 * s).round() as usize).max(1),
            ((w as f64 * s).round() as usize).max(1),
        )
    } else {
        (h, w)
    }
}

/// Crop window `(top, left, height, width)` in pixels for an area fraction.
pub fn crop_window(kind: AttackKind, area: f64, h: usize, w: usize, seed: u64) -> (usize, usize, usize, usize) {
    let side = area.sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    if kind == AttackKind::RandomCrop {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw), ch, cw)
    } else {
        ((h - ch) / 2, (w - cw) / 2, ch, cw)
    }
}

/// Gaussian kernel for an odd size, with the customary size-derived sigma.
pub fn blur_kernel(size: usize) -> Vec<f64> {
    let sigma = 0.3 * ((size as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// True JPEG round trip of an `(N, 3, H, W)` batch in `[-1, 1]`.
pub fn jpeg_roundtrip<T: Real>(x: &Tensor<T>, quality: u8) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..n {
        let mut rgb = vec![0u8; hw * 3];
        for ch in 0..c {
            for p in 0..hw {
                let v = x.data()[(i * c + ch) * hw + p].f64();
                rgb[p * 3 + ch] = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
            }
        }
        let mut buf = Vec::new();
        image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality)
            .encode(&rgb, w as u32, h as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::Codec(e.to_string()))?;
        let dec = image::load(Cursor::new(buf), image::ImageFormat::Jpeg)
            .map_err(|e| Error::Codec(e.to_string()))?
            .to_rgb8();
        let raw = dec.as_raw();
        for ch in 0..c {
            for p in 0..hw {
                out.push(T::of(raw[p * 3 + ch] as f64 / 127.5 - 1.0));
            }
        }
    }
    Ok(Tensor::from_vec(&[n, c, h, w], out))
}

/// Applies `spec` to an `(N, 3, H, W)` batch on the tape. Every op except JPEG
/// is differentiable; JPEG passes the gradient straight through.
pub fn apply_attack_var<'t, T: Real>(spec: &AttackSpec, x: Var<'t, T>) -> Result<Var<'t, T>> {
    spec.validate()?;
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape(format!("attacks expect (N, 3, H, W), got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    Ok(match spec.kind {
        AttackKind::Identity => x,
        AttackKind::CenterCrop | AttackKind::RandomCrop => {
            let (top, left, ch, cw) = crop_window(spec.kind, spec.param, h, w, spec.seed);
            let map = SpatialMap::crop_resize(h, w, top as f64, left as f64, ch as f64, cw as f64, h, w);
            x.spatial(&Arc::new(map))
        }
        AttackKind::Rotation => x.spatial(&Arc::new(SpatialMap::rotate(h, w, spec.param))),
        AttackKind::Resize => {
            let (oh, ow) = output_size(spec, h, w);
            x.spatial(&Arc::new(SpatialMap::resize(h, w, oh, ow)))
        }
        AttackKind::Brightness => x
            .add_scalar(1.0)
            .mul_scalar(spec.param)
            .add_scalar(-1.0)
            .clamp(-1.0, 1.0),
        AttackKind::Contrast => x.contrast_blend(spec.param).clamp(-1.0, 1.0),
        AttackKind::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let noise = Tensor::randn(&s, 2.0 * spec.param, &mut rng);
            x.add(x.tape().constant(noise)).clamp(-1.0, 1.0)
        }
        AttackKind::Blur => {
            let k = blur_kernel(spec.param as usize);
            let hmap = Arc::new(SpatialMap::convolve_1d(h, w, &k, true));
            let vmap = Arc::new(SpatialMap::convolve_1d(h, w, &k, false));
            x.spatial(&hmap).spatial(&vmap)
        }
        AttackKind::Jpeg => {
            let y = jpeg_roundtrip(&x.value(), spec.param as u8)?;
            x.straight_through(y)
        }
        AttackKind::Combined => {
            let steps = combined_steps();
            let mut y = x;
            for st in &steps {
                y = apply_attack_var(st, y)?;
            }
            y
        }
        AttackKind::Reencode => {
            return Err(Error::invalid("the reencode attack needs an autoencoder; use reencode_attack"))
        }
    })
}

fn combined_steps() -> [AttackSpec; 3] {
    [
        AttackSpec::new(AttackKind::CenterCrop, 0.40),
        AttackSpec::new(AttackKind::Brightness, 2.0),
        AttackSpec::new(AttackKind::Jpeg, 80.0),
    ]
}

/// Applies `spec` to an `(N, 3, H, W)` batch without gradient tracking.
pub fn apply_attack_batch(spec: &AttackSpec, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let tape = Tape::new();
    let y = apply_attack_var(spec, tape.constant(x.clone()))?;
    Ok((*y.value()).clone())
}

pub fn apply_attack(spec: &AttackSpec, img: &ImageGrid) -> Result<ImageGrid> {
    let y = apply_attack_batch(spec, &images_to_batch(std::slice::from_ref(img))?)?;
    Ok(ImageGrid::new(y.batch_item(0))?.with_source(ImageSource::Attacked))
}

/// Center crop to 40% area, brightness 2.0, then JPEG 80.
pub fn combined_attack(img: &ImageGrid) -> Result<ImageGrid> {
    apply_attack(&AttackSpec::new(AttackKind::Combined, 0.0), img)
}

/// `decode(encode(img))` through `ae`.
pub fn reencode_attack(ae: &Autoencoder<f32>, img: &ImageGrid) -> Result<ImageGrid> {
    let z = ae.encode(img)?;
    Ok(ae.decode(&z)?.with_source(ImageSource::Attacked))
}

/// Batch form of [`reencode_attack`].
pub fn reencode_batch(ae: &Autoencoder<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let y = ae.decode_batch(&ae.encode_batch(x)?)?;
    Ok(y.map(|v| v.clamp(-1.0, 1.0)))
}

/// Uniform sampler over the training kinds; inactive samplers yield identity.
#[derive(Clone, Debug)]
pub struct AttackSampler {
    pub kinds: Vec<AttackKind>,
    pub active: bool,
}

impl Default for AttackSampler {
    fn default() -> Self {
        Self {
            kinds: AttackKind::TRAINING.to_vec(),
            active: true,
        }
    }
}

impl AttackSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AttackSpec {
        if !self.active || self.kinds.is_empty() {
            return AttackSpec::identity();
        }
        let kind = self.kinds[rng.random_range(0..self.kinds.len())];
        let param = match kind {
            AttackKind::Blur => (3 + 2 * rng.random_range(0..=8)) as f64,
            AttackKind::Jpeg => rng.random_range(40..=100) as f64,
            AttackKind::Rotation => {
                let mag = rng.random_range(2.0..=46.0);
                if rng.random_bool(0.5) { mag } else { -mag }
            }
            k => match k.range() {
                Some((lo, hi)) => rng.random_range(lo..=hi),
                None => 0.0,
            },
        };
        AttackSpec {
            kind,
            param,
            seed: rng.random(),
        }
    }
}

/// A named evaluation attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackPreset {
    pub name: String,
    pub spec: AttackSpec,
}

impl AttackPreset {
    pub fn new(name: &str, kind: AttackKind, param: f64) -> Self {
        Self {
            name: name.to_string(),
            spec: AttackSpec::new(kind, param),
        }
    }
}

/// The robustness columns of the main results table, plus a milder crop.
pub fn default_presets() -> Vec<AttackPreset> {
    use AttackKind::*;
    vec![
        AttackPreset::new("None", Identity, 0.0),
        AttackPreset::new("C. Crop 0.1", CenterCrop, 0.1),
        AttackPreset::new("C. Crop 0.5", CenterCrop, 0.5),
        AttackPreset::new("R. Crop 0.1", RandomCrop, 0.1),
        AttackPreset::new("Resize 0.7", Resize, 0.7),
        AttackPreset::new("Rot. 15", Rotation, 15.0),
        AttackPreset::new("Blur", Blur, 7.0),
        AttackPreset::new("Contr. 2.0", Contrast, 2.0),
        AttackPreset::new("Bright. 2.0", Brightness, 2.0),
        AttackPreset::new("JPEG 70", Jpeg, 70.0),
        AttackPreset::new("Comb.", Combined, 0.0),
    ]
}

/// Strength sweeps per attack family, for accuracy-vs-strength plots.
pub fn sweep_presets() -> Vec<AttackPreset> {
    use AttackKind::*;
    let mut v = vec![AttackPreset::new("None", Identity, 0.0)];
    for r in [5.0, 15.0, 25.0] {
        v.push(AttackPreset::new(&format!("Rot. {r}"), Rotation, r));
    }
    for a in [0.1, 0.3, 0.5, 0.7, 0.9] {
        v.push(AttackPreset::new(&format!("C. Crop {a}"), CenterCrop, a));
        v.push(AttackPreset::new(&format!("R. Crop {a}"), RandomCrop, a));
    }
    for a in [0.6, 0.7, 0.8] {
        v.push(AttackPreset::new(&format!("Resize {a}"), Resize, a));
    }
    for k in [3.0, 7.0, 11.0, 15.0, 19.0] {
        v.push(AttackPreset::new(&format!("Blur {k}"), Blur, k));
    }
    for f in [0.5, 1.5, 2.0] {
        v.push(AttackPreset::new(&format!("Contr. {f:.1}"), Contrast, f));
        v.push(AttackPreset::new(&format!("Bright. {f:.1}"), Brightness, f));
    }
    for q in [50.0, 70.0, 90.0] {
        v.push(AttackPreset::new(&format!("JPEG {q}"), Jpeg, q));
    }
    v
}

/// Parses `name<TAB>kind<TAB>param` lines; `#` starts a comment.
pub fn parse_presets(text: &str) -> Result<Vec<AttackPreset>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::invalid(format!(
                "preset line {}: expected name<TAB>kind<TAB>param",
                ln + 1
            )));
        }
        let kind: AttackKind = fields[1].trim().parse()?;
        let param: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("preset line {}: bad parameter {:?}", ln + 1, fields[2])))?;
        let spec = AttackSpec::new(kind, param);
        spec.validate()?;
        out.push(AttackPreset {
            name: fields[0].trim().to_string(),
            spec,
        });
    }
    if out.is_empty() {
        return Err(Error::Empty("attack preset list"));
    }
    Ok(out)
}

pub fn format_presets(presets: &[AttackPreset]) -> String {
    let mut s = String::from("# name\tkind\tparam\n");
    for p in presets {
        s.push_str(&format!("{}\t{}\t{}\n", p.name, p.spec.kind, p.spec.param));
    }
    s
}

pub fn read_presets(path: &Path) -> Result<Vec<AttackPreset>> {
    parse_presets(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_image;
    use proptest::prelude::*;

    fn batch(seed: u64, size: usize) -> Tensor<f32> {
        images_to_batch(&[synthetic_image(seed, size), synthetic_image(seed + 1, size)]).unwrap()
    }

    fn mid(kind: AttackKind) -> AttackSpec {
        let p = match kind {
            AttackKind::Blur => 7.0,
            AttackKind::Jpeg => 70.0,
            AttackKind::Resize => 0.7,
            k => k.range().map(|(lo, hi)| (lo + hi) / 2.0).unwrap_or(0.0),
        };
        AttackSpec::new(kind, p).with_seed(3)
    }

    #[test]
    fn neutral_parameters_are_identity() {
        let img = synthetic_image(2, 32);
        assert_eq!(apply_attack(&AttackSpec::identity(), &img).unwrap().values(), img.values());
        for kind in [AttackKind::Brightness, AttackKind::Contrast] {
            let out = apply_attack(&AttackSpec::new(kind, 1.0), &img).unwrap();
            for (a, b) in out.values().data().iter().zip(img.values().data()) {
                assert!((a - b).abs() < 1e-6, "{kind}");
            }
        }
    }

    #[test]
    fn center_crop_keeps_the_central_region() {
        let img = synthetic_image(5, 64);
        assert_eq!(crop_window(AttackKind::CenterCrop, 0.25, 64, 64, 0), (16, 16, 32, 32));
        let out = apply_attack(&AttackSpec::new(AttackKind::CenterCrop, 0.25), &img).unwrap();
        // slice the central 32x32 directly, then upsample it
        let mut region = Vec::new();
        for c in 0..3 {
            for y in 16..48 {
                for x in 16..48 {
                    region.push(img.values().data()[(c * 64 + y) * 64 + x]);
                }
            }
        }
        let region = Tensor::from_vec(&[1, 3, 32, 32], region);
        let expect = SpatialMap::resize(32, 32, 64, 64).apply(&region);
        for (a, b) in out.values().data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_side_fraction() {
        for area in [0.08, 0.1, 0.3, 0.5, 0.9, 0.95] {
            let (_, _, ch, cw) = crop_window(AttackKind::CenterCrop, area, 64, 64, 0);
            assert!((ch as f64 - 64.0 * area.sqrt()).abs() <= 1.0);
            assert!((cw as f64 - 64.0 * area.sqrt()).abs() <= 1.0);
        }
    }

    #[test]
    fn every_training_kind_has_input_gradient() {
        for kind in AttackKind::TRAINING {
            let spec = mid(kind);
            let tape = Tape::<f32>::new();
            let x = tape.leaf(batch(1, 32), true);
            let y = apply_attack_var(&spec, x).unwrap();
            assert!(y.value().all_finite());
            let loss = y.sqr().mean_all();
            let g = tape.backward(loss);
            let norm = g.get(x).map(|t| t.max_abs()).unwrap_or(0.0);
            assert!(norm > 0.0, "{kind} has zero input gradient");
        }
    }

    #[test]
    fn attacks_are_deterministic_and_change_images() {
        let img = synthetic_image(9, 32);
        for kind in AttackKind::TRAINING {
            let spec = mid(kind);
            let a = apply_attack(&spec, &img).unwrap();
            assert_eq!(a, apply_attack(&spec, &img).unwrap());
            if kind != AttackKind::Identity {
                assert_ne!(a.values(), img.values(), "{kind}");
            }
        }
        let resized = apply_attack(&AttackSpec::new(AttackKind::Resize, 0.5), &img).unwrap();
        assert_eq!((resized.height(), resized.width()), (23, 23));
    }

    #[test]
    fn combined_is_crop_brightness_jpeg() {
        let img = synthetic_image(4, 64);
        let c = combined_attack(&img).unwrap();
        let mut manual = img.clone();
        for st in combined_steps() {
            manual = apply_attack(&st, &manual).unwrap();
        }
        assert_eq!(c.values(), manual.values());
        let no_jpeg = apply_attack(
            &AttackSpec::new(AttackKind::Brightness, 2.0),
            &apply_attack(&AttackSpec::new(AttackKind::CenterCrop, 0.4), &img).unwrap(),
        )
        .unwrap();
        assert_ne!(c.values(), no_jpeg.values());
    }

    #[test]
    fn rotation_fills_corners_with_gray() {
        let img = ImageGrid::new(Tensor::full(&[3, 32, 32], 0.8)).unwrap();
        let r = apply_attack(&AttackSpec::new(AttackKind::Rotation, 45.0), &img).unwrap();
        assert_eq!(r.values().data()[0], 0.0);
        assert!((r.values().data()[16 * 32 + 16] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn sampler_is_uniform_and_in_range() {
        let sampler = AttackSampler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = std::collections::HashMap::new();
        let n = 10_000;
        let mut signs = [0, 0];
        for _ in 0..n {
            let s = sampler.sample(&mut rng);
            s.validate().unwrap();
            *counts.entry(s.kind).or_insert(0usize) += 1;
            if s.kind == AttackKind::Rotation {
                assert!((2.0..=46.0).contains(&s.param.abs()));
                signs[(s.param > 0.0) as usize] += 1;
            }
        }
        assert_eq!(counts.len(), 10);
        // binomial 3-sigma band around 0.1
        let sd = (0.1f64 * 0.9 / n as f64).sqrt();
        for (k, c) in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.1).abs() <= 3.0 * sd, "{k}: {f}");
        }
        assert!(signs[0] > 0 && signs[1] > 0);
        let a: Vec<_> = (0..20).map(|_| sampler.sample(&mut ChaCha8Rng::seed_from_u64(5))).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let off = AttackSampler { active: false, ..AttackSampler::default() };
        assert_eq!(off.sample(&mut rng).kind, AttackKind::Identity);
    }

    #[test]
    fn presets_round_trip() {
        let p = default_presets();
        assert_eq!(parse_presets(&format_presets(&p)).unwrap(), p);
        for s in sweep_presets() {
            s.spec.validate().unwrap();
        }
        assert!(parse_presets("x\tjpeg\t20\n").is_err());
        assert!(parse_presets("x\tnope\t1\n").is_err());
        assert!(parse_presets("# only comments\n").is_err());
    }

    #[test]
    fn range_errors_name_kind_and_bounds() {
        let e = AttackSpec::new(AttackKind::Jpeg, 30.0).validate().unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("jpeg") && msg.contains("40") && msg.contains("100"), "{msg}");
        assert!(AttackSpec::new(AttackKind::Blur, 4.0).validate().is_err());
        assert!(AttackSpec::new(AttackKind::Rotation, -15.0).validate().is_ok());
    }

    proptest! {
        #[test]
        fn out_of_range_parameters_are_rejected(idx in 0usize..9, p in -1000.0f64..1000.0) {
            let kind = AttackKind::TRAINING[idx];
            let (lo, hi) = kind.range().unwrap();
            let mag = if kind == AttackKind::Rotation { p.abs() } else { p };
            prop_assume!(mag < lo || mag > hi);
            let spec = AttackSpec::new(kind, p);
            prop_assert!(spec.validate().is_err());
            prop_assert!(apply_attack(&spec, &synthetic_image(1, 16)).is_err());
        }
    }
}
