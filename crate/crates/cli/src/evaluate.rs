//! `evaluate`: posterior-predictive metrics for one or more runs on a test
//! set, plus the tables behind the plots.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use split_hmc::datasets::{read_csv, Dataset, Targets};
use split_hmc::diagnostics::cumulative_accuracy;
use split_hmc::model::BayesianMlp;
use split_hmc::uncertainty::{
    calibration, entropy_cdf_misclassified, mi_confusion_matrix, posterior_predictive, predicted_labels,
    regression_bands, summarize, EmpiricalCdf, MiMatrix, PredictiveTensor, RegressionBands, UncertaintySummary,
};

use crate::artifacts::{fmt_f64, read_chain, write_json, RunManifest, StoredChain, CONFIG_FILE};
use crate::config::{Artifact, ExperimentConfig};
use crate::error::{CliError, Result};

pub const REPORT_FILE: &str = "report.json";
pub const COMPARISON_FILE: &str = "comparison.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub nll: f64,
    pub nll_floored: usize,
    pub brier: f64,
    pub mean_predictive_entropy: f64,
    pub mean_mutual_information: f64,
    /// Unweighted means over populated cells; `None` when no cell qualifies.
    pub mean_mi_diagonal: Option<f64>,
    pub mean_mi_off_diagonal: Option<f64>,
    pub misclassified: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub rmse: f64,
    /// `−(1/N) Σ log mean_s N(y | μ_s, τ⁻¹)` on the test set.
    pub nll: f64,
    /// Fractions of training targets outside the total-variance bands.
    pub train_outside_1sigma: f64,
    pub train_outside_2sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Metrics {
    Classification(ClassificationMetrics),
    Regression(RegressionMetrics),
}

/// Everything the classification tables are built from.
#[derive(Debug, Clone)]
pub struct ClassificationEval {
    pub metrics: ClassificationMetrics,
    pub summary: UncertaintySummary,
    pub entropy_cdf: EmpiricalCdf,
    pub mi_matrix: MiMatrix,
}

pub fn evaluate_classification(pt: &PredictiveTensor, labels: &[usize]) -> Result<ClassificationEval> {
    let summary = summarize(pt, labels)?;
    let mi_matrix = mi_confusion_matrix(pt, labels)?;
    let entropy_cdf = entropy_cdf_misclassified(pt, labels)?;
    let n = labels.len() as f64;
    let pred = predicted_labels(pt)?;
    let metrics = ClassificationMetrics {
        accuracy: summary.accuracy,
        nll: summary.nll,
        nll_floored: summary.nll_floored,
        brier: summary.brier,
        mean_predictive_entropy: summary.predictive_entropy.iter().sum::<f64>() / n,
        mean_mutual_information: summary.mutual_information.iter().sum::<f64>() / n,
        mean_mi_diagonal: mi_matrix.mean_diagonal(),
        mean_mi_off_diagonal: mi_matrix.mean_off_diagonal(),
        misclassified: pred.iter().zip(labels).filter(|(p, l)| p != l).count(),
    };
    Ok(ClassificationEval {
        metrics,
        summary,
        entropy_cdf,
        mi_matrix,
    })
}

fn column(y: &Array2<f64>) -> Result<Vec<f64>> {
    if y.ncols() != 1 {
        return Err(CliError::Config(format!(
            "regression evaluation needs one target column, found {}",
            y.ncols()
        )));
    }
    Ok(y.column(0).to_vec())
}

pub fn evaluate_regression(
    pt: &PredictiveTensor,
    targets: &[f64],
    train_pt: &PredictiveTensor,
    train_targets: &[f64],
) -> Result<(RegressionMetrics, RegressionBands)> {
    let bands = regression_bands(pt)?;
    let PredictiveTensor::Regression { means, precision } = pt else {
        return Err(CliError::Config("expected a regression predictive".into()));
    };
    let n = targets.len();
    let rmse = (bands
        .mean
        .iter()
        .zip(targets)
        .map(|(m, y)| (m - y).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    let s = means.nrows() as f64;
    let log_norm = 0.5 * (precision / std::f64::consts::TAU).ln();
    let mut nll = 0.0;
    for (i, y) in targets.iter().enumerate() {
        let logs: Vec<f64> = means
            .column(i)
            .iter()
            .map(|mu| log_norm - 0.5 * precision * (y - mu).powi(2))
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
        nll -= lse - s.ln();
    }
    let cal = calibration(&regression_bands(train_pt)?, train_targets)?;
    Ok((
        RegressionMetrics {
            rmse,
            nll: nll / n as f64,
            train_outside_1sigma: cal.outside_1sigma,
            train_outside_2sigma: cal.outside_2sigma,
        },
        bands,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub id: String,
    pub scheme: String,
    pub name: String,
    pub run_dir: String,
    pub samples_used: usize,
    pub metrics: Metrics,
    /// Files relative to the report directory.
    pub metrics_file: String,
    pub summary: Option<String>,
    pub entropy_cdf: Option<String>,
    pub mi_matrix: Option<String>,
    pub cumulative_accuracy: Option<String>,
    pub log_posterior: Option<String>,
    pub bands: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportIndex {
    pub task: String,
    pub test: String,
    /// Logarithm base of every entropy and mutual information value.
    pub entropy_units: String,
    pub comparison: String,
    pub entries: Vec<ReportEntry>,
}

impl ReportIndex {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(REPORT_FILE);
        let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Evenly spaced rows, at most `max` of them.
fn thin_rows(samples: &Array2<f64>, max: usize) -> Array2<f64> {
    let s = samples.nrows();
    if s <= max {
        return samples.clone();
    }
    let idx: Vec<usize> = (0..max).map(|i| i * s / max).collect();
    samples.select(Axis(0), &idx)
}

fn write_table(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(CliError::io(path))
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

#[derive(Default)]
struct EntryFiles {
    summary: Option<String>,
    entropy_cdf: Option<String>,
    mi_matrix: Option<String>,
    cumulative_accuracy: Option<String>,
    log_posterior: Option<String>,
    bands: Option<String>,
}

struct Run {
    dir: PathBuf,
    manifest: RunManifest,
    config: ExperimentConfig,
    model: BayesianMlp,
    train: Dataset,
}

fn load_run(dir: &Path) -> Result<Run> {
    let manifest = RunManifest::read(dir)?;
    let cfg_path = dir.join(&manifest.config);
    let text = std::fs::read_to_string(&cfg_path).map_err(CliError::io(&cfg_path))?;
    let config = ExperimentConfig::from_toml_str(&text)?;
    let prior = match manifest.command.as_str() {
        "baseline" => config.baseline()?.prior_std,
        _ => None,
    };
    // training rows come from the run directory so csv-backed configs
    // evaluate against exactly what was sampled
    let prepared = config.prepare(prior)?;
    let train = read_csv(dir.join(&manifest.train), config.target_kind(&prepared))?;
    if prepared.model.num_params() != manifest.dim {
        return Err(CliError::Config(format!(
            "{}: manifest dimension {} does not match {} in {CONFIG_FILE}",
            dir.display(),
            manifest.dim,
            prepared.model.num_params()
        )));
    }
    Ok(Run {
        dir: dir.to_path_buf(),
        manifest,
        config,
        model: prepared.model,
        train,
    })
}

/// Evaluates every scheme of every run in `runs` on `test` and writes the
/// report under `out`.
pub fn cmd_evaluate(runs: &[PathBuf], test: &Path, out: &Path, max_samples: usize) -> Result<ReportIndex> {
    if runs.is_empty() {
        return Err(CliError::Config("no run directories given".into()));
    }
    if max_samples == 0 {
        return Err(CliError::Config("max-samples must be positive".into()));
    }
    let loaded = runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let first = &loaded[0];
    for r in &loaded[1..] {
        if r.manifest.dim != first.manifest.dim || r.config.is_classification() != first.config.is_classification() {
            return Err(CliError::Config(format!(
                "mismatched model dimensions: {} has {} parameters, {} has {}",
                first.dir.display(),
                first.manifest.dim,
                r.dir.display(),
                r.manifest.dim
            )));
        }
    }
    let kind = first.config.target_kind(&first.config.prepare(None)?);
    let test_data = read_csv(test, kind)?;
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    let classification = first.config.is_classification();

    let mut entries = Vec::new();
    let mut ids = BTreeSet::new();
    for run in &loaded {
        let wanted: BTreeSet<Artifact> = run.config.output.artifacts.iter().copied().collect();
        for record in &run.manifest.runs {
            let mut id = format!("{}-{}", run.manifest.name, record.scheme);
            let mut k = 1;
            while ids.contains(&id) {
                k += 1;
                id = format!("{}-{}-{k}", run.manifest.name, record.scheme);
            }
            ids.insert(id.clone());
            let chains = record
                .chains
                .iter()
                .map(|c| read_chain(&run.dir, c, run.manifest.dim))
                .collect::<Result<Vec<StoredChain>>>()?;
            let views: Vec<_> = chains.iter().map(|c| c.samples.view()).collect();
            let pooled = concatenate(Axis(0), &views).map_err(|e| CliError::Format(e.to_string()))?;
            let used = thin_rows(&pooled, max_samples);
            let pt = posterior_predictive(&run.model, used.view(), &test_data.x)?;
            let file = |suffix: &str| format!("{id}_{suffix}");
            let mut files = EntryFiles::default();
            let metrics = match &test_data.targets {
                Targets::Labels { labels, .. } => {
                    let ev = evaluate_classification(&pt, labels)?;

                    let f = file("summary.json");
                    write_json(&out.join(&f), &ev.summary)?;
                    files.summary = Some(f);
                    if wanted.contains(&Artifact::EntropyCdf) {
                        let f = file("entropy_cdf.csv");
                        write_table(
                            &out.join(&f),
                            &strings(&["entropy", "cdf"]),
                            ev.entropy_cdf.steps().into_iter().map(|(x, p)| vec![fmt_f64(x), fmt_f64(p)]),
                        )?;
                        files.entropy_cdf = Some(f);
                    }
                    if wanted.contains(&Artifact::MiMatrix) {
                        let f = file("mi_matrix.csv");
                        let c = ev.mi_matrix.classes();
                        let rows = (0..c).flat_map(|t| (0..c).map(move |p| (t, p))).map(|(t, p)| {
                            vec![
                                t.to_string(),
                                p.to_string(),
                                ev.mi_matrix.counts[[t, p]].to_string(),
                                ev.mi_matrix.cell(t, p).map_or(String::new(), fmt_f64),
                            ]
                        });
                        write_table(&out.join(&f), &strings(&["true", "predicted", "count", "mean_mi"]), rows)?;
                        files.mi_matrix = Some(f);
                    }
                    if wanted.contains(&Artifact::CumulativeAccuracy) {
                        let curves = chains
                            .iter()
                            .map(|c| {
                                let pt = posterior_predictive(&run.model, c.samples.view(), &test_data.x)?;
                                Ok(cumulative_accuracy(&pt, labels)?)
                            })
                            .collect::<Result<Vec<Vec<f64>>>>()?;
                        let f = file("cumulative_accuracy.csv");
                        write_curve_table(&out.join(&f), &curves)?;
                        files.cumulative_accuracy = Some(f);
                    }
                    Metrics::Classification(ev.metrics)
                }
                Targets::Real(y) => {
                    let train_pt = posterior_predictive(&run.model, used.view(), &run.train.x)?;
                    let train_y = match &run.train.targets {
                        Targets::Real(t) => column(t)?,
                        Targets::Labels { .. } => unreachable!("task checked above"),
                    };
                    let test_y = column(y)?;
                    let (metrics, bands) = evaluate_regression(&pt, &test_y, &train_pt, &train_y)?;
                    if wanted.contains(&Artifact::Bands) {
                        let f = file("bands.csv");
                        let rows = (0..test_y.len()).map(|i| {
                            vec![
                                fmt_f64(test_data.x[[i, 0]]),
                                fmt_f64(test_y[i]),
                                fmt_f64(bands.mean[i]),
                                fmt_f64(bands.epistemic_std[i]),
                                fmt_f64(bands.total_std[i]),
                            ]
                        });
                        write_table(
                            &out.join(&f),
                            &strings(&["x", "y", "mean", "epistemic_std", "total_std"]),
                            rows,
                        )?;
                        files.bands = Some(f);
                    }
                    Metrics::Regression(metrics)
                }
            };
            if wanted.contains(&Artifact::LogPosterior) {
                let f = file("log_posterior.csv");
                let curves: Vec<Vec<f64>> = chains.iter().map(|c| c.log_posterior.clone()).collect();
                let len = curves.iter().map(Vec::len).max().unwrap_or(0);
                let mut header = vec!["sample_index".to_string()];
                header.extend(chains.iter().map(|c| format!("chain_{}", c.chain_index)));
                let rows = (0..len).map(|i| {
                    let mut r = vec![i.to_string()];
                    r.extend(curves.iter().map(|c| c.get(i).map_or(String::new(), |v| fmt_f64(*v))));
                    r
                });
                write_table(&out.join(&f), &header, rows)?;
                files.log_posterior = Some(f);
            }
            let metrics_file = file("metrics.json");
            write_json(&out.join(&metrics_file), &metrics)?;
            entries.push(ReportEntry {
                id,
                scheme: record.scheme.clone(),
                name: run.manifest.name.clone(),
                run_dir: run.dir.display().to_string(),
                samples_used: used.nrows(),
                metrics,
                metrics_file,
                summary: files.summary,
                entropy_cdf: files.entropy_cdf,
                mi_matrix: files.mi_matrix,
                cumulative_accuracy: files.cumulative_accuracy,
                log_posterior: files.log_posterior,
                bands: files.bands,
            });
        }
    }
    write_comparison(&out.join(COMPARISON_FILE), &entries)?;
    let index = ReportIndex {
        task: if classification { "classification" } else { "regression" }.into(),
        test: test.display().to_string(),
        entropy_units: "nats".into(),
        comparison: COMPARISON_FILE.into(),
        entries,
    };
    write_json(&out.join(REPORT_FILE), &index)?;
    Ok(index)
}

/// Per-chain curves truncated to a common length, with the across-chain
/// mean and standard deviation (n − 1 divisor; zero for a single chain).
fn write_curve_table(path: &Path, curves: &[Vec<f64>]) -> Result<()> {
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    let k = curves.len() as f64;
    let mut header = strings(&["index", "mean", "std"]);
    header.extend((0..curves.len()).map(|c| format!("chain_{c}")));
    let rows = (0..len).map(|i| {
        let vals: Vec<f64> = curves.iter().map(|c| c[i]).collect();
        let mean = vals.iter().sum::<f64>() / k;
        let std = if curves.len() > 1 {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut r = vec![(i + 1).to_string(), fmt_f64(mean), fmt_f64(std)];
        r.extend(vals.iter().map(|v| fmt_f64(*v)));
        r
    });
    write_table(path, &header, rows)
}

#[derive(Clone, Copy)]
enum Goal {
    Max,
    Min,
    Near(f64),
}

impl Goal {
    /// Larger is better.
    fn score(self, v: f64) -> f64 {
        match self {
            Goal::Max => v,
            Goal::Min => -v,
            Goal::Near(t) => -(v - t).abs(),
        }
    }
}

/// One row per entry and a final `best` row naming the winning entry for
/// each metric.
fn write_comparison(path: &Path, entries: &[ReportEntry]) -> Result<()> {
    use Goal::*;
    let columns = |m: &Metrics| -> Vec<(&'static str, Option<f64>, Goal)> {
        match m {
            Metrics::Classification(c) => vec![
                ("accuracy", Some(c.accuracy), Max),
                ("nll", Some(c.nll), Min),
                ("brier", Some(c.brier), Min),
                ("mean_mi_diagonal", c.mean_mi_diagonal, Min),
                ("mean_mi_off_diagonal", c.mean_mi_off_diagonal, Max),
            ],
            // Gaussian tail mass beyond one and two standard deviations
            Metrics::Regression(r) => vec![
                ("rmse", Some(r.rmse), Min),
                ("nll", Some(r.nll), Min),
                ("train_outside_1sigma", Some(r.train_outside_1sigma), Near(0.317_310_507_862_914_1)),
                ("train_outside_2sigma", Some(r.train_outside_2sigma), Near(0.045_500_263_896_358_4)),
            ],
        }
    };
    let Some(first) = entries.first() else {
        return Ok(());
    };
    let names: Vec<&str> = columns(&first.metrics).iter().map(|c| c.0).collect();
    let mut header = strings(&["entry", "scheme", "samples_used"]);
    header.extend(names.iter().map(|s| s.to_string()));
    let mut rows: Vec<Vec<String>> = entries
        .iter()
        .map(|e| {
            let mut r = vec![e.id.clone(), e.scheme.clone(), e.samples_used.to_string()];
            r.extend(columns(&e.metrics).iter().map(|c| c.1.map_or(String::new(), fmt_f64)));
            r
        })
        .collect();
    let mut best = vec!["best".to_string(), String::new(), String::new()];
    for j in 0..names.len() {
        let mut winner: Option<(&str, f64)> = None;
        for e in entries {
            let (_, v, goal) = columns(&e.metrics)[j];
            if let Some(v) = v.map(|v| goal.score(v)) {
                let better = winner.is_none_or(|(_, w)| v > w);
                if better {
                    winner = Some((&e.id, v));
                }
            }
        }
        best.push(winner.map_or(String::new(), |w| w.0.to_string()));
    }
    rows.push(best);
    write_table(path, &header, rows)
}
