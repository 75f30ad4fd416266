use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use latentmark::eval::{fpr_table, EvalReport, RunManifest};
use latentmark::trainer::StepRecord;
use plotters::prelude::*;

use crate::commands::{load_config, out_dir};
use crate::Global;

#[derive(Args, Debug)]
pub struct Plot {
    #[command(subcommand)]
    what: PlotKind,
    /// Output SVG path; defaults to `<out>/<kind>.svg`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum PlotKind {
    /// Detection FPR against the threshold n, log scale.
    Fpr {
        #[arg(long, default_value_t = 48)]
        k: usize,
        #[arg(long, default_value_t = 24)]
        n_min: usize,
    },
    /// Bar chart of bit accuracy per attack from an `eval.json`.
    Eval {
        #[arg(long)]
        report: PathBuf,
    },
    /// Accuracy against strength per attack family from a sweep `eval.json`.
    Sweep {
        #[arg(long)]
        report: PathBuf,
    },
    /// Loss and bit accuracy per step from a training `metrics.jsonl`.
    Training {
        #[arg(long)]
        metrics: PathBuf,
    },
}

fn plot_err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow::anyhow!("plot: {e}")
}

fn read_report(p: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
}

impl Plot {
    pub fn run(self, g: &Global, argv: Vec<String>) -> Result<()> {
        let cfg = load_config(g)?;
        let dir = out_dir(g, "plot")?;
        let name = match &self.what {
            PlotKind::Fpr { .. } => "fpr",
            PlotKind::Eval { .. } => "eval",
            PlotKind::Sweep { .. } => "sweep",
            PlotKind::Training { .. } => "training",
        };
        let output = self.output.clone().unwrap_or_else(|| dir.join(format!("{name}.svg")));
        match &self.what {
            PlotKind::Fpr { k, n_min } => fpr_chart(&output, *k, *n_min)?,
            PlotKind::Eval { report } => bar_chart(&output, &read_report(report)?)?,
            PlotKind::Sweep { report } => sweep_chart(&output, &read_report(report)?)?,
            PlotKind::Training { metrics } => training_chart(&output, metrics)?,
        }
        RunManifest::new("plot", argv, &cfg).write(&dir)?;
        println!("{}", output.display());
        Ok(())
    }
}

fn fpr_chart(out: &Path, k: usize, n_min: usize) -> Result<()> {
    let rows = fpr_table(k, n_min.min(k), k)?;
    let root = SVGBackend::new(out, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let lo = rows.iter().map(|r| r.1).fold(1.0f64, f64::min).max(1e-300);
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("Detection FPR, k = {k}"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(64)
        .build_cartesian_2d(rows[0].0 as f64..k as f64, (lo..1.0).log_scale())
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("matched bits n")
        .y_desc("P(M >= n)")
        .y_label_formatter(&|v| format!("{v:.0e}"))
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(rows.iter().map(|&(n, f)| (n as f64, f.max(lo))), &BLUE))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn bar_chart(out: &Path, report: &EvalReport) -> Result<()> {
    let mut rows = report.rows.clone();
    rows.extend(report.reencode.clone());
    let root = SVGBackend::new(out, (96 + 64 * rows.len() as u32, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("Bit accuracy ({})", report.mode), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(48)
        .y_label_area_size(48)
        .build_cartesian_2d((0..rows.len()).into_segmented(), 0.0..1.0)
        .map_err(plot_err)?;
    let names: Vec<String> = rows.iter().map(|r| r.attack.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => names.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .y_desc("bit accuracy")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(
            Histogram::vertical(&chart)
                .style(BLUE.mix(0.6).filled())
                .margin(6)
                .data(rows.iter().enumerate().map(|(i, r)| (i, r.bit_accuracy))),
        )
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Splits `"Rot. 15"` into family `"Rot."` and strength 15.
fn family_and_strength(name: &str) -> Option<(String, f64)> {
    let (fam, v) = name.rsplit_once(' ')?;
    Some((fam.to_string(), v.parse().ok()?))
}

fn sweep_chart(out: &Path, report: &EvalReport) -> Result<()> {
    let mut families: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &report.rows {
        if let Some((fam, s)) = family_and_strength(&r.attack) {
            families.entry(fam).or_default().push((s, r.bit_accuracy));
        }
    }
    let n = families.len().max(1);
    let cols = 3.min(n);
    let rows = n.div_ceil(cols);
    let root = SVGBackend::new(out, (320 * cols as u32, 260 * rows as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    for (area, (fam, pts)) in root.split_evenly((rows, cols)).iter().zip(&families) {
        let (lo, hi) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
        let pad = ((hi - lo) * 0.05).max(1e-3);
        let mut chart = ChartBuilder::on(area)
            .caption(fam, ("sans-serif", 16))
            .margin(8)
            .x_label_area_size(28)
            .y_label_area_size(40)
            .build_cartesian_2d(lo - pad..hi + pad, 0.0..1.0)
            .map_err(plot_err)?;
        chart.configure_mesh().draw().map_err(plot_err)?;
        chart.draw_series(LineSeries::new(pts.iter().copied(), &RED)).map_err(plot_err)?;
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, RED.filled())))
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

fn training_chart(out: &Path, metrics: &Path) -> Result<()> {
    let text = fs::read_to_string(metrics).with_context(|| format!("reading {}", metrics.display()))?;
    let recs: Vec<StepRecord> = text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect();
    if recs.is_empty() {
        return Err(latentmark::Error::Empty("training log").into());
    }
    let last = recs.last().map_or(1, |r| r.step.max(1)) as f64;
    let ymax = recs.iter().map(|r| r.l_total).filter(|v| v.is_finite()).fold(1.0f64, f64::max);
    let root = SVGBackend::new(out, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Training", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .right_y_label_area_size(48)
        .build_cartesian_2d(0.0..last, 0.0..ymax)
        .map_err(plot_err)?
        .set_secondary_coord(0.0..last, 0.0..1.0);
    chart.configure_mesh().x_desc("step").y_desc("total loss").draw().map_err(plot_err)?;
    chart
        .configure_secondary_axes()
        .y_desc("bit accuracy")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(recs.iter().map(|r| (r.step as f64, r.l_total)), &BLUE))
        .map_err(plot_err)?
        .label("total loss")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], BLUE));
    chart
        .draw_secondary_series(LineSeries::new(recs.iter().map(|r| (r.step as f64, r.bit_acc)), &RED))
        .map_err(plot_err)?
        .label("bit accuracy")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], RED));
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
