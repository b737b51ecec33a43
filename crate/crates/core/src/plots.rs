//! Plot emission from a metrics directory: loss curves, per-expert
//! importance bars and a 2-D PCA projection of refined embeddings. Each
//! figure is written as SVG next to the CSV it is drawn from.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::RoutingStats;
use crate::error::{CalmError, Result};
use crate::model::Stage;
use crate::train::MetricsHistory;

pub const METRICS_FILE: &str = "metrics.json";
pub const ROUTING_FILE: &str = "routing-stats.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.json";

/// Refined embeddings of a split with their culture labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDump {
    pub culture_ids: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
}

/// Files written by [`emit_plots`].
#[derive(Clone, Debug, PartialEq)]
pub struct PlotFiles {
    pub csv: Vec<PathBuf>,
    pub svg: Vec<PathBuf>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn plot_err(e: impl std::fmt::Display) -> CalmError {
    CalmError::Input(format!("plot rendering failed: {e}"))
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Joint => "joint",
        Stage::Contrastive => "contrastive",
    }
}

const LOSS_COLUMNS: [&str; 6] = ["task", "window", "explicit_aux", "latent_aux", "balance", "identity"];

pub fn loss_csv(history: &MetricsHistory) -> String {
    let mut out = String::from("epoch,stage");
    for c in LOSS_COLUMNS {
        write!(out, ",probe_{c}").unwrap();
    }
    out.push_str(",window_explicit,window_latent,train_total,correction_rate,task_accuracy\n");
    for m in &history.epochs {
        write!(out, "{},{}", m.epoch, stage_name(m.stage)).unwrap();
        for (_, v) in m.probe.named() {
            write!(out, ",{v}").unwrap();
        }
        let total = m.train_total.map(|t| t.to_string()).unwrap_or_default();
        writeln!(
            out,
            ",{},{},{},{},{}",
            m.probe_window_explicit, m.probe_window_latent, total, m.correction_rate, m.task_accuracy
        )
        .unwrap();
    }
    out
}

pub fn importance_csv(routing: &RoutingStats) -> String {
    let mut out = String::from("dimension,expert,importance,coverage\n");
    for d in &routing.dimensions {
        for (e, v) in d.importance.iter().enumerate() {
            writeln!(out, "{},{e},{v},{}", d.dimension.name(), d.coverage).unwrap();
        }
    }
    out
}

/// Top-two principal axes by power iteration with deflation; each axis is
/// signed so its largest-magnitude entry is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    let Some(d) = rows.first().map(Vec::len) else {
        return Vec::new();
    };
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += r[i] * r[j];
            }
        }
    }
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for k in 0..2.min(d) {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i + k) % 7) as f64 * 0.1).collect();
        for _ in 0..500 {
            let mut w: Vec<f64> = (0..d).map(|i| cov[i].iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
            for a in &axes {
                let p: f64 = a.iter().zip(&w).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(a).for_each(|(x, y)| *x -= p * y);
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            v = w.iter().map(|x| x / norm).collect();
        }
        let lead = v.iter().cloned().fold(0.0_f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(v);
    }
    centered
        .iter()
        .map(|r| {
            let mut p = [0.0; 2];
            for (k, a) in axes.iter().enumerate() {
                p[k] = r.iter().zip(a).map(|(x, y)| x * y).sum();
            }
            p
        })
        .collect()
}

pub fn projection_csv(dump: &EmbeddingDump) -> String {
    let mut out = String::from("index,culture,pc1,pc2\n");
    for (i, (p, c)) in pca_2d(&dump.embeddings).iter().zip(&dump.culture_ids).enumerate() {
        writeln!(out, "{i},{c},{},{}", p[0], p[1]).unwrap();
    }
    out
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if lo > hi {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

fn draw_losses(path: &Path, history: &MetricsHistory) -> Result<()> {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let max_epoch = history.epochs.last().map_or(1, |m| m.epoch.max(1));
    let (lo, hi) = span(history.epochs.iter().flat_map(|m| m.probe.named().map(|(_, v)| v)));
    let mut chart = ChartBuilder::on(&root)
        .caption("probe loss terms", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..max_epoch as f64, lo..hi)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").draw().map_err(plot_err)?;
    for (k, name) in LOSS_COLUMNS.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        let pts: Vec<(f64, f64)> = history
            .epochs
            .iter()
            .map(|m| (m.epoch as f64, m.probe.named()[k].1))
            .collect();
        chart
            .draw_series(LineSeries::new(pts, color))
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn draw_importance(path: &Path, routing: &RoutingStats) -> Result<()> {
    let root = SVGBackend::new(path, (800, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let bars: Vec<(usize, f64)> = routing
        .dimensions
        .iter()
        .enumerate()
        .flat_map(|(di, d)| d.importance.iter().map(move |&v| (di, v)))
        .collect();
    let top = bars.iter().map(|b| b.1).fold(0.0, f64::max).max(1e-6) * 1.05;
    let mut chart = ChartBuilder::on(&root)
        .caption("expert importance", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..bars.len().max(1) as f64, 0f64..top)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("expert (grouped by dimension)").draw().map_err(plot_err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, &(di, v))| {
            let color = Palette99::pick(di).filled();
            Rectangle::new([(i as f64 + 0.1, 0.0), (i as f64 + 0.9, v)], color)
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn draw_projection(path: &Path, dump: &EmbeddingDump) -> Result<()> {
    let root = SVGBackend::new(path, (600, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let pts = pca_2d(&dump.embeddings);
    let xs = span(pts.iter().map(|p| p[0]));
    let ys = span(pts.iter().map(|p| p[1]));
    let mut chart = ChartBuilder::on(&root)
        .caption("refined embeddings (PCA)", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(xs.0..xs.1, ys.0..ys.1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("pc1").y_desc("pc2").draw().map_err(plot_err)?;
    chart
        .draw_series(
            pts.iter()
                .zip(&dump.culture_ids)
                .map(|(p, &c)| Circle::new((p[0], p[1]), 3, Palette99::pick(c).filled())),
        )
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Reads `metrics.json` (required) plus `routing-stats.json` and
/// `embeddings.json` (optional) from `metrics_dir` and writes CSVs and SVGs
/// into `out_dir`. Absent optional inputs give header-only CSVs.
pub fn emit_plots(metrics_dir: &Path, out_dir: &Path) -> Result<PlotFiles> {
    let metrics_path = metrics_dir.join(METRICS_FILE);
    if !metrics_path.is_file() {
        return Err(CalmError::MissingArtifact(metrics_path.display().to_string()));
    }
    let history: MetricsHistory = read_json(&metrics_path)?;
    let routing_path = metrics_dir.join(ROUTING_FILE);
    let routing: RoutingStats = if routing_path.is_file() {
        read_json(&routing_path)?
    } else {
        RoutingStats::default()
    };
    let emb_path = metrics_dir.join(EMBEDDINGS_FILE);
    let dump: EmbeddingDump = if emb_path.is_file() {
        read_json(&emb_path)?
    } else {
        EmbeddingDump::default()
    };
    if dump.culture_ids.len() != dump.embeddings.len() {
        return Err(CalmError::Input("embeddings and culture ids differ in length".into()));
    }

    fs::create_dir_all(out_dir)?;
    let files = [
        ("loss_curves", loss_csv(&history)),
        ("expert_importance", importance_csv(&routing)),
        ("embedding_projection", projection_csv(&dump)),
    ];
    let mut out = PlotFiles {
        csv: Vec::new(),
        svg: Vec::new(),
    };
    for (name, text) in &files {
        let p = out_dir.join(format!("{name}.csv"));
        fs::write(&p, text)?;
        out.csv.push(p);
    }
    let svg = |name: &str| out_dir.join(format!("{name}.svg"));
    draw_losses(&svg("loss_curves"), &history)?;
    draw_importance(&svg("expert_importance"), &routing)?;
    draw_projection(&svg("embedding_projection"), &dump)?;
    out.svg = ["loss_curves", "expert_importance", "embedding_projection"].map(svg).to_vec();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::EpochMetrics;

    #[test]
    fn empty_history_gives_header_only_csvs() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(METRICS_FILE), "{\"epochs\": []}").unwrap();
        let out = dir.path().join("plots");
        let files = emit_plots(dir.path(), &out).unwrap();
        for p in &files.csv {
            assert_eq!(fs::read_to_string(p).unwrap().lines().count(), 1);
        }
        assert!(files.svg.iter().all(|p| p.is_file()));
    }

    #[test]
    fn rows_match_epochs_and_rerun_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let history = MetricsHistory {
            epochs: (0..4)
                .map(|e| EpochMetrics {
                    epoch: e,
                    ..EpochMetrics::default()
                })
                .collect(),
        };
        fs::write(dir.path().join(METRICS_FILE), serde_json::to_string(&history).unwrap()).unwrap();
        let dump = EmbeddingDump {
            culture_ids: vec![0, 1, 0],
            embeddings: vec![vec![1.0, 0.0, 0.2], vec![0.0, 1.0, 0.1], vec![0.9, 0.1, 0.0]],
        };
        fs::write(dir.path().join(EMBEDDINGS_FILE), serde_json::to_string(&dump).unwrap()).unwrap();
        let a = emit_plots(dir.path(), &dir.path().join("a")).unwrap();
        let b = emit_plots(dir.path(), &dir.path().join("b")).unwrap();
        assert_eq!(fs::read_to_string(&a.csv[0]).unwrap().lines().count(), 5);
        for (x, y) in a.csv.iter().chain(&a.svg).zip(b.csv.iter().chain(&b.svg)) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
    }

    #[test]
    fn missing_metrics_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_plots(dir.path(), dir.path()),
            Err(CalmError::MissingArtifact(_))
        ));
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.01 * (i % 2) as f64]).collect();
        let p = pca_2d(&rows);
        let spread0 = p.iter().map(|q| q[0].abs()).fold(0.0, f64::max);
        let spread1 = p.iter().map(|q| q[1].abs()).fold(0.0, f64::max);
        assert!(spread0 > 4.0 && spread1 < 0.1);
    }
}
