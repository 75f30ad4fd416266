use std::path::Path;
use std::process::{Command, Output};

use latentmark::autoencoder::{Autoencoder, AutoencoderConfig};
use latentmark::dataset::heldout_image;
use latentmark::matching::{detect, fpr_detection, solve_threshold};
use latentmark::trainer::{save_run, WatermarkModels};
use latentmark::{BitMessage, WatermarkConfig};

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentmark"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_run(dir: &Path, k: usize) -> (WatermarkConfig, WatermarkModels<f32>) {
    let ae = Autoencoder::new(AutoencoderConfig {
        widths: vec![4, 6, 8, 8],
        image_size: 32,
        ..AutoencoderConfig::desk(8)
    })
    .unwrap();
    let cfg = WatermarkConfig {
        k,
        block_size: 2,
        stage_channels: ae.decoder.stage_channels().to_vec(),
        image_size: 32,
        extractor_resolution: 32,
        extractor_width: 8,
        ..WatermarkConfig::default()
    };
    let models = WatermarkModels::new(ae, &cfg).unwrap();
    save_run(dir, &models, &cfg).unwrap();
    (cfg, models)
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["fpr-table", "--bogus"], &[]] {
        let o = bin(args, tmp.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    }
}

#[test]
fn fpr_table_has_one_row_per_threshold() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&["--out", "ft", "fpr-table", "--k", "48", "--n-min", "25", "--n-max", "48"], tmp.path());
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 24);
    for r in rows {
        let (n, f) = r.split_once('\t').unwrap();
        let n: usize = n.parse().unwrap();
        let f: f64 = f.parse().unwrap();
        let exact = fpr_detection(n, 48).unwrap();
        assert!((f - exact).abs() <= 1e-15 * exact, "{n}: {f} vs {exact}");
    }
    assert_eq!(std::fs::read_to_string(tmp.path().join("ft/fpr_table.tsv")).unwrap(), text);
    assert!(tmp.path().join("ft/manifest.json").exists());
}

#[test]
fn validation_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&["fpr-table", "--k", "48", "--n-min", "40", "--n-max", "60"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    std::fs::write(tmp.path().join("bad.toml"), "k = 0\n").unwrap();
    let o = bin(&["--config", "bad.toml", "fpr-table", "--n-min", "1", "--n-max", "2"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    std::fs::write(tmp.path().join("unknown.toml"), "frobs = 1\n").unwrap();
    let o = bin(&["--config", "unknown.toml", "fpr-table", "--n-min", "1", "--n-max", "2"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    let o = bin(&["attack", "--input", "x.png", "--kind", "jpeg", "--param", "5", "--output", "y.png"], tmp.path());
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn missing_files_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&["extract", "--run", "nowhere", "--input", "x.png"], tmp.path());
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn simulate_attribution_is_perfect_without_flips() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&["--seed", "5", "simulate-attribution", "--users", "500", "--per-user", "2", "--k", "48"], tmp.path());
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["accuracy"], 1.0);
    assert_eq!(v["false_attributions"], 0);
    assert_eq!(v["images"], 1000);
}

#[test]
fn image_commands_and_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let (cfg, models) = tiny_run(&run, 16);
    let cover = heldout_image(3, 32);
    cover.save_png(&tmp.path().join("cover.png")).unwrap();
    let hex = BitMessage::random(16, 9).to_hex();

    let o = bin(&["--out", "e", "embed", "--run", "run", "--input", "cover.png", "--message", &hex, "--output", "wm.png"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("wm.png").exists());
    let o = bin(&["--out", "g", "generate", "--run", "run", "--message", &hex, "--output", "gen.png"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = bin(&["--out", "x", "extract", "--run", "run", "--input", "wm.png"], tmp.path());
    assert!(o.status.success());
    let direct = models
        .extractor
        .extract_message(&latentmark::ImageGrid::load(&tmp.path().join("wm.png")).unwrap())
        .unwrap();
    assert_eq!(stdout(&o).trim(), direct.to_hex());

    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("x/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "extract");
    assert_eq!(m["seed"], cfg.seed);
    assert_eq!(m["checkpoints"]["autoencoder"], models.autoencoder.checksum());

    let o = bin(&["--out", "a", "attack", "--input", "wm.png", "--kind", "jpeg", "--param", "70", "--output", "att.png"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = bin(&["--out", "a", "attack", "--input", "wm.png", "--kind", "reencode", "--autoencoder", "run/autoencoder.ckpt", "--output", "re.png"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    std::fs::write(tmp.path().join("users.tsv"), format!("alice\t{hex}\nbob\t{}\n", BitMessage::random(16, 10).to_hex())).unwrap();
    let o = bin(&["--out", "at", "attribute", "--run", "run", "--input", "wm.png", "--users", "users.tsv", "--n", "16"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["threshold"], 16);

    let o = bin(&["--out", "ev", "eval", "--run", "run", "--images", "2", "--messages", "2"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let header = stdout(&o).lines().next().unwrap().to_string();
    let names: Vec<String> = latentmark::attacks::default_presets().into_iter().map(|p| p.name).collect();
    let cols: Vec<&str> = header.split('\t').collect();
    assert_eq!(cols[1..=names.len()], names.iter().map(String::as_str).collect::<Vec<_>>()[..]);
    let o = bin(&["--out", "pl", "plot", "eval", "--report", "ev/eval.json"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(tmp.path().join("pl/eval.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn eval_honours_a_preset_file_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_run(&tmp.path().join("run"), 16);
    std::fs::write(tmp.path().join("p.tsv"), "Q 50\tjpeg\t50\nplain\tidentity\t0\nR. Crop 0.3\trandom_crop\t0.3\n").unwrap();
    let args = ["--seed", "2", "--out", "ev", "eval", "--run", "run", "--presets", "p.tsv", "--images", "2", "--messages", "2"];
    let a = bin(&args, tmp.path());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = bin(&args, tmp.path());
    assert_eq!(stdout(&a), stdout(&b));
    let header = stdout(&a).lines().next().unwrap().to_string();
    assert!(header.starts_with("mode\tQ 50\tplain\tR. Crop 0.3\t"));
}

#[test]
fn detect_rejects_unwatermarked_images() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, models) = tiny_run(&tmp.path().join("run"), 48);
    let reference = BitMessage::random(cfg.k, 77);
    let n = solve_threshold(1e-6, 1, cfg.k).unwrap();
    let mut positives = 0;
    for i in 0..1000 {
        let got = models.extractor.extract_message(&heldout_image(i, 32)).unwrap();
        positives += usize::from(detect(&got, &reference, n).unwrap().decision);
    }
    assert!(positives <= 1, "{positives}");

    for i in 0..5 {
        heldout_image(i, 32).save_png(&tmp.path().join(format!("h{i}.png"))).unwrap();
        let o = bin(
            &["--out", "d", "detect", "--run", "run", "--input", &format!("h{i}.png"), "--message", &reference.to_hex(), "--fpr", "1e-6"],
            tmp.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        assert_eq!(v["decision"], false);
        assert_eq!(v["threshold"], n);
    }
}
