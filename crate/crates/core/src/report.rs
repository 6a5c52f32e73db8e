//! Run directories and cross-run summaries.
//!
//! A run directory holds `config.toml`, `task_sequence.json`,
//! `accuracy_matrix.csv`, `metrics.json`, `loss_log.csv`,
//! `prototypes.csv`, `confusion.csv`, `model.ckpt` and optionally
//! `features.bin`. Directories are written once and never modified.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::audio::FeatureMap;
use crate::checkpoint::{BundleMeta, ModelBundle};
use crate::engine::{
    compute_acc, compute_bwt, loss_log_csv, make_task_sequence, AccuracyMatrix, Corpus, RunConfig, RunMetrics, RunReport,
};
use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const MATRIX_FILE: &str = "accuracy_matrix.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Serialize)]
struct NamedTask<'a> {
    classes: Vec<&'a str>,
    train: &'a [String],
    test: &'a [String],
}

#[derive(Serialize)]
struct NamedSequence<'a> {
    order_seed: u64,
    class_order: Vec<&'a str>,
    tasks: Vec<NamedTask<'a>>,
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))
}

pub fn model_bundle(report: &RunReport) -> Result<ModelBundle> {
    let head = report
        .learner
        .head
        .clone()
        .ok_or_else(|| Error::InvalidArgument("run has no trained head".into()))?;
    Ok(ModelBundle {
        meta: BundleMeta {
            backbone: report.config.backbone.clone(),
            frontend: report.config.frontend.clone(),
            class_names: report.ordered_names(),
            standardizer: report.standardizer.clone(),
            method: report.config.method.to_string(),
            tasks_learned: report.learner.tasks_done,
        },
        backbone: report.learner.backbone.clone(),
        head,
        space: report.learner.space.clone(),
    })
}

/// Writes a fresh run directory. An existing non-empty directory is an
/// error.
pub fn write_run_dir(report: &RunReport, dir: &Path) -> Result<()> {
    if dir.exists() && std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some() {
        return Err(Error::InvalidArgument(format!(
            "run directory {} already exists and is not empty",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = &report.class_names;
    let seq = &report.sequence;
    let named = NamedSequence {
        order_seed: seq.order_seed,
        class_order: seq.class_order.iter().map(|&c| names[c].as_str()).collect(),
        tasks: seq
            .tasks
            .iter()
            .map(|t| NamedTask {
                classes: t.classes.iter().map(|&c| names[c].as_str()).collect(),
                train: &t.train,
                test: &t.test,
            })
            .collect(),
    };
    write(dir, CONFIG_FILE, report.config.to_toml_string())?;
    write(dir, "task_sequence.json", serde_json::to_string_pretty(&named)?)?;
    write(dir, MATRIX_FILE, report.matrix.to_csv())?;
    write(dir, METRICS_FILE, serde_json::to_string_pretty(&report.metrics())?)?;
    write(dir, "loss_log.csv", loss_log_csv(&report.loss_log))?;
    write(dir, "prototypes.csv", report.learner.space.to_csv())?;
    write(dir, "confusion.csv", report.confusion.to_csv(&report.ordered_names()))?;
    model_bundle(report)?.save(&dir.join(CHECKPOINT_FILE))?;
    if let Some(dump) = &report.feature_dump {
        write(dir, "features.bin", dump.to_bytes())?;
    }
    Ok(())
}

/// What `report` needs from a finished run directory.
#[derive(Debug, Clone)]
pub struct StoredRun {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub matrix: AccuracyMatrix,
    pub stored_metrics: RunMetrics,
}

impl StoredRun {
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            config: RunConfig::from_toml_str(&read(CONFIG_FILE)?)?,
            matrix: AccuracyMatrix::from_csv(&read(MATRIX_FILE)?)?,
            stored_metrics: serde_json::from_str(&read(METRICS_FILE)?)?,
        })
    }

    pub fn label(&self) -> String {
        format!("{} (seed {})", self.config.method, self.config.seed)
    }

    /// ACC and BWT recomputed from the stored matrix; BWT is absent when the
    /// matrix has only its final row.
    pub fn recompute(&self) -> Result<(f64, Option<f64>)> {
        let acc = compute_acc(&self.matrix)?;
        let complete = (0..self.matrix.tasks()).all(|t| self.matrix.row(t).is_some());
        let bwt = if complete && self.matrix.tasks() >= 2 {
            Some(compute_bwt(&self.matrix)?)
        } else {
            None
        };
        Ok((acc, bwt))
    }
}

/// One line per run: `run,method,seed,acc,bwt,after_task_0..`.
pub fn summary_csv(runs: &[StoredRun]) -> Result<String> {
    let t = runs.iter().map(|r| r.matrix.tasks()).max().unwrap_or(0);
    let mut s = String::from("run,method,seed,acc,bwt");
    (0..t).for_each(|i| write!(s, ",avg_after_task_{i}").unwrap());
    s.push('\n');
    for r in runs {
        let (acc, bwt) = r.recompute()?;
        write!(
            s,
            "{},{},{},{acc},{}",
            r.dir.display(),
            r.config.method,
            r.config.seed,
            bwt.map(|b| b.to_string()).unwrap_or_default()
        )
        .unwrap();
        for v in r.matrix.average_curve() {
            s.push(',');
            if let Some(v) = v {
                write!(s, "{v}").unwrap();
            }
        }
        s.push('\n');
    }
    Ok(s)
}

/// Plain-text table of ACC and BWT in percent.
pub fn summary_table(runs: &[StoredRun]) -> Result<String> {
    let mut s = format!("{:<40} {:>9} {:>9}\n", "run", "ACC (%)", "BWT");
    for r in runs {
        let (acc, bwt) = r.recompute()?;
        let bwt = bwt.map(|b| format!("{b:.3}")).unwrap_or_else(|| "-".into());
        writeln!(s, "{:<40} {:>9.3} {:>9}", r.label(), acc * 100.0, bwt).unwrap();
    }
    Ok(s)
}

/// Accuracy of a stored model on each task's test clips, in task order.
/// The task sequence is rebuilt from `cfg`, so this is the final row of the
/// run's accuracy matrix.
pub fn evaluate_bundle(bundle: &ModelBundle, corpus: &Corpus, cfg: &RunConfig) -> Result<Vec<f64>> {
    let sequence = make_task_sequence(&corpus.clips, &corpus.class_names, cfg)?;
    let ordered: Vec<&str> = sequence.class_order.iter().map(|&c| corpus.class_names[c].as_str()).collect();
    if ordered.len() != bundle.meta.class_names.len() || ordered.iter().zip(&bundle.meta.class_names).any(|(a, b)| a != b) {
        return Err(Error::Checkpoint(format!(
            "checkpoint classes {:?} do not match the dataset's class order {:?}",
            bundle.meta.class_names, ordered
        )));
    }
    sequence
        .tasks
        .iter()
        .map(|task| {
            let maps = task
                .test
                .iter()
                .map(|id| {
                    corpus
                        .features
                        .get(id)
                        .cloned()
                        .ok_or_else(|| Error::Data(format!("no features for clip {id}; run ingest first")))
                })
                .collect::<Result<Vec<FeatureMap>>>()?;
            let predicted = bundle.predict_maps(&maps)?;
            let correct = maps
                .iter()
                .zip(&predicted)
                .filter(|(m, &p)| sequence.ordinal(m.label) == Some(p))
                .count();
            Ok(correct as f64 / maps.len() as f64)
        })
        .collect()
}

/// Loss-weight cells of a grid sweep, in α-major order.
pub fn grid_cells(alphas: &[f64], betas: &[f64], gammas: &[f64]) -> Vec<(f64, f64, f64)> {
    let mut cells = Vec::new();
    for &a in alphas {
        for &b in betas {
            for &g in gammas {
                cells.push((a, b, g));
            }
        }
    }
    cells
}

pub fn cell_dir_name(alpha: f64, beta: f64, gamma: f64) -> String {
    format!("alpha{alpha}_beta{beta}_gamma{gamma}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub acc: f64,
    pub bwt: Option<f64>,
    pub dir: PathBuf,
}

/// Cells ranked by ACC, best first; ties keep grid order.
pub fn ranking_csv(results: &[GridResult]) -> String {
    let mut order: Vec<&GridResult> = results.iter().collect();
    order.sort_by(|a, b| b.acc.total_cmp(&a.acc));
    let mut s = String::from("rank,alpha,beta,gamma,acc,bwt,run_dir\n");
    for (i, r) in order.iter().enumerate() {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            i + 1,
            r.alpha,
            r.beta,
            r.gamma,
            r.acc,
            r.bwt.map(|b| b.to_string()).unwrap_or_default(),
            r.dir.display()
        )
        .unwrap();
    }
    s
}

const PALETTE: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of mean seen-task accuracy after each task, one line per
/// series. Missing points break nothing; single points are drawn as dots.
pub fn accuracy_curve_svg(series: &[(String, Vec<Option<f64>>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 170.0, 20.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let n = series.iter().map(|s| s.1.len()).max().unwrap_or(1).max(1);
    let x = |i: usize| left + if n > 1 { pw * i as f64 / (n - 1) as f64 } else { pw / 2.0 };
    let y = |v: f64| top + ph * (1.0 - v);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        writeln!(
            s,
            r##"<line x1="{left}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{}</text>"##,
            left + pw,
            left - 6.0,
            y(v) + 4.0,
            (v * 100.0).round(),
            y = y(v)
        )
        .unwrap();
    }
    for i in 0..n {
        writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{i}</text>"#,
            x(i),
            top + ph + 18.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.1}" y="{}" text-anchor="middle">task</text>"#,
        left + pw / 2.0,
        h - 10.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">ACC (%)</text>"#,
        top + ph / 2.0
    )
    .unwrap();
    for (k, (label, values)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (x(i), y(v))))
            .collect();
        if pts.len() > 1 {
            let d: Vec<String> = pts.iter().map(|(px, py)| format!("{px:.1},{py:.1}")).collect();
            writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                d.join(" ")
            )
            .unwrap();
        }
        for (px, py) in &pts {
            writeln!(s, r#"<circle cx="{px:.1}" cy="{py:.1}" r="3" fill="{color}"/>"#).unwrap();
        }
        let ly = top + 16.0 * k as f64 + 8.0;
        writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="12" height="3" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            left + pw + 12.0,
            ly - 2.0,
            left + pw + 30.0,
            ly + 3.0,
            escape(label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_ranking_orders_by_acc() {
        let cells = grid_cells(&[0.1, 1.0], &[1.0, 5.0], &[5.0, 20.0]);
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[1], (0.1, 1.0, 20.0));
        let results: Vec<GridResult> = cells
            .iter()
            .enumerate()
            .map(|(i, &(alpha, beta, gamma))| GridResult {
                alpha,
                beta,
                gamma,
                acc: (i % 3) as f64 / 3.0,
                bwt: Some(-0.1),
                dir: cell_dir_name(alpha, beta, gamma).into(),
            })
            .collect();
        let csv = ranking_csv(&results);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 9);
        assert!(lines[1].starts_with("1,0.1,5,5,"));
        assert!(lines[1].ends_with("alpha0.1_beta5_gamma5"));
    }

    #[test]
    fn svg_has_one_line_per_multi_point_series() {
        let svg = accuracy_curve_svg(&[
            ("aft <a>".into(), vec![Some(1.0), Some(0.5), Some(0.4)]),
            ("joint".into(), vec![None, None, Some(0.9)]),
        ]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches("<circle").count(), 4);
        assert!(svg.contains("aft &lt;a&gt;"));
    }
}
