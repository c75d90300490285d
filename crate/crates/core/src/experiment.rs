//! End-to-end runs: train, then write the report, summary, checkpoint,
//! clustering and scatter plot into an output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autoenc::write_params;
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::dcn::{collapse_indicator, embed, train, Checkpoint, EpochReport, TrainOutput};
use crate::error::{Error, Result};
use crate::kmeans::{write_assignments, write_centroids_csv, ClusterState};
use crate::linalg::Matrix;
use crate::metrics::Scores;

pub const REPORT_HEADER: &str = "epoch,total_loss,recon_loss,clust_loss,nmi,ari,acc,seconds";

/// Categorical palette for the scatter plot; colors cycle past 20 classes.
pub const PALETTE: [&str; 20] = [
    "#1f77b4", "#aec7e8", "#ff7f0e", "#ffbb78", "#2ca02c", "#98df8a", "#d62728", "#ff9896",
    "#9467bd", "#c5b0d5", "#8c564b", "#c49c94", "#e377c2", "#f7b6d2", "#7f7f7f", "#c7c7c7",
    "#bcbd22", "#dbdb8d", "#17becf", "#9edae5",
];

const SVG_SIZE: f64 = 800.0;
const SVG_MARGIN: f64 = 40.0;

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub output: TrainOutput,
    pub collapse: f64,
    /// Files written, in writing order.
    pub files: Vec<PathBuf>,
}

pub fn report_csv(reports: &[EpochReport]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in reports {
        let (nmi, ari, acc) = match r.scores {
            Some(sc) => (format!("{:?}", sc.nmi), format!("{:?}", sc.ari), format!("{:?}", sc.acc)),
            None => Default::default(),
        };
        let _ = writeln!(
            s,
            "{},{:?},{:?},{:?},{nmi},{ari},{acc},{:?}",
            r.epoch, r.total_loss, r.recon_loss, r.clust_loss, r.seconds
        );
    }
    s
}

/// Scatter of the first two columns of `h`, one circle per row colored by
/// `classes[i]`, with centroids drawn as black crosses.
pub fn scatter_svg(h: &Matrix, classes: &[usize], centroids: Option<&Matrix>) -> Result<String> {
    if h.cols() < 2 {
        return Err(Error::invalid("a scatter plot needs at least 2 latent dimensions"));
    }
    if classes.len() != h.rows() {
        return Err(Error::invalid("one class per plotted point is required"));
    }
    let points: Vec<(f64, f64)> = h.row_iter().map(|r| (r[0], r[1])).collect();
    let extra = centroids.into_iter().flat_map(|m| m.row_iter().map(|r| (r[0], r[1])));
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in points.iter().copied().chain(extra) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let inner = SVG_SIZE - 2.0 * SVG_MARGIN;
    let sx = inner / span(x0, x1);
    let sy = inner / span(y0, y1);
    let px = |x: f64| SVG_MARGIN + (x - x0) * sx;
    let py = |y: f64| SVG_SIZE - SVG_MARGIN - (y - y0) * sy;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{0}" viewBox="0 0 {0} {0}">"#,
        SVG_SIZE
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (&(x, y), &c) in points.iter().zip(classes) {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}" fill-opacity="0.7"/>"#,
            px(x),
            py(y),
            PALETTE[c % PALETTE.len()]
        );
    }
    if let Some(m) = centroids {
        for r in m.row_iter() {
            let (cx, cy) = (px(r[0]), py(r[1]));
            let _ = writeln!(
                s,
                r#"<path d="M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}" stroke="black" stroke-width="2"/>"#,
                cx - 6.0,
                cy - 6.0,
                cx + 6.0,
                cy + 6.0,
                cx - 6.0,
                cy + 6.0,
                cx + 6.0,
                cy - 6.0
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn write(path: PathBuf, contents: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    files.push(path);
    Ok(())
}

fn fmt_scores(s: Option<Scores>) -> String {
    match s {
        Some(s) => format!("nmi={:.6} ari={:.6} acc={:.6}", s.nmi, s.ari, s.acc),
        None => "n/a (no labels)".to_string(),
    }
}

/// Configuration, seed and code version, so the run can be repeated.
pub fn reproducibility_block(cfg: &ExperimentConfig, dataset: &Dataset) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# reproducibility");
    let _ = writeln!(s, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(
        s,
        "dataset = {} ({} x {}){}",
        dataset.name,
        dataset.len(),
        dataset.dim(),
        dataset
            .source
            .as_ref()
            .map(|p| format!(" from {}", p.display()))
            .unwrap_or_default()
    );
    let _ = writeln!(s, "# config");
    s.push_str(&cfg.to_text());
    s
}

fn summary(cfg: &ExperimentConfig, dataset: &Dataset, out: &TrainOutput, collapse: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mode = {}", cfg.mode);
    let _ = writeln!(s, "initial = {}", fmt_scores(out.reports.first().and_then(|r| r.scores)));
    let _ = writeln!(s, "final = {}", fmt_scores(out.final_scores));
    if let Some(last) = out.reports.last() {
        let _ = writeln!(
            s,
            "final_loss = total {:?} recon {:?} clust {:?}",
            last.total_loss, last.recon_loss, last.clust_loss
        );
    }
    let _ = writeln!(s, "collapse_indicator = {collapse:?}");
    if collapse < 0.05 {
        let _ = writeln!(s, "warning = latent clusters are collapsed relative to the embedding spread");
    }
    s.push('\n');
    s.push_str(&reproducibility_block(cfg, dataset));
    s
}

fn write_state(dir: &Path, params: &crate::autoenc::AutoencoderParams, state: &ClusterState, files: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join("params.dcnp");
    write_params(&p, params)?;
    files.push(p);
    let p = dir.join("centroids.csv");
    write_centroids_csv(&p, &state.centroids)?;
    files.push(p);
    let p = dir.join("assignments.csv");
    write_assignments(&p, &state.assignments)?;
    files.push(p);
    Ok(())
}

/// Trains on `dataset` and writes `report.csv`, `summary.txt`,
/// `params.dcnp`, `centroids.csv`, `assignments.csv` and, for 2-D latents or
/// when `cfg.scatter` is set, `scatter.svg` into `dir`.
///
/// On divergence the last finite checkpoint and a summary are written before
/// the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, dataset: &Dataset, dir: impl AsRef<Path>) -> Result<ExperimentResult> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let out = match train(dataset, cfg) {
        Ok(out) => out,
        Err(err) => {
            if let Error::Diverged {
                reason,
                checkpoint: Some(cp),
            } = &err
            {
                let Checkpoint { epoch, params, state } = cp.as_ref();
                write_state(dir, params, state, &mut files)?;
                let text = format!(
                    "status = diverged after epoch {epoch}: {reason}\n\n{}",
                    reproducibility_block(cfg, dataset)
                );
                write(dir.join("summary.txt"), &text, &mut files)?;
            }
            return Err(err);
        }
    };
    let h = embed(&out.params, dataset)?;
    let collapse = collapse_indicator(&h, &out.state)?;

    write(dir.join("report.csv"), &report_csv(&out.reports), &mut files)?;
    write(dir.join("summary.txt"), &summary(cfg, dataset, &out, collapse), &mut files)?;
    write_state(dir, &out.params, &out.state, &mut files)?;
    if h.cols() == 2 || (cfg.scatter && h.cols() >= 2) {
        let classes = dataset.labels.as_deref().unwrap_or(&out.state.assignments);
        let svg = scatter_svg(&h, classes, Some(&out.state.centroids))?;
        write(dir.join("scatter.svg"), &svg, &mut files)?;
    }
    Ok(ExperimentResult {
        output: out,
        collapse,
        files,
    })
}
