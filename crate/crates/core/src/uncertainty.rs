//! Posterior-predictive summaries: entropy, mutual information (BALD), NLL,
//! Brier score, misclassification-entropy CDFs, per-category MI matrices and
//! regression credible bands. Entropies are in nats.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{BayesianMlp, LikelihoodSpec};

/// Probabilities below this are floored when taking logs in [`nll`].
pub const PROB_FLOOR: f64 = 1e-12;

const SIMPLEX_TOL: f64 = 1e-9;

/// Per-sample predictions, not yet averaged over the posterior.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictiveTensor {
    /// `S × N × C` class probabilities.
    Classification(Array3<f64>),
    /// `S × N` network means, plus the likelihood precision `τ`.
    Regression { means: Array2<f64>, precision: f64 },
}

impl PredictiveTensor {
    pub fn classification(probs: Array3<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("predictive samples"));
        }
        for row in probs.lanes(Axis(2)) {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::InvalidData(format!(
                    "probability row {row} is not on the simplex"
                )));
            }
        }
        Ok(Self::Classification(probs))
    }

    pub fn regression(means: Array2<f64>, precision: f64) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::Empty("predictive samples"));
        }
        if !(precision > 0.0) {
            return Err(Error::InvalidConfig("likelihood precision must be positive".into()));
        }
        Ok(Self::Regression { means, precision })
    }

    pub fn num_samples(&self) -> usize {
        match self {
            Self::Classification(p) => p.shape()[0],
            Self::Regression { means, .. } => means.nrows(),
        }
    }

    pub fn num_points(&self) -> usize {
        match self {
            Self::Classification(p) => p.shape()[1],
            Self::Regression { means, .. } => means.ncols(),
        }
    }

    pub fn probs(&self) -> Result<&Array3<f64>> {
        match self {
            Self::Classification(p) => Ok(p),
            Self::Regression { .. } => Err(Error::InvalidData(
                "expected a classification predictive, got regression".into(),
            )),
        }
    }

    /// `N × C` posterior-mean probabilities.
    pub fn mean_probs(&self) -> Result<Array2<f64>> {
        Ok(self.probs()?.mean_axis(Axis(0)).expect("at least one sample"))
    }
}

/// Runs the network for every row of `samples` (`S × d`) on `x`.
pub fn posterior_predictive(
    model: &BayesianMlp,
    samples: ArrayView2<f64>,
    x: &Array2<f64>,
) -> Result<PredictiveTensor> {
    if samples.nrows() == 0 {
        return Err(Error::Empty("posterior samples"));
    }
    check_dim("posterior sample", model.num_params(), samples.ncols())?;
    let (s, n) = (samples.nrows(), x.nrows());
    match model.likelihood {
        LikelihoodSpec::Categorical => {
            let c = model.arch.output_dim();
            let mut probs = Array3::zeros((s, n, c));
            for (i, omega) in samples.outer_iter().enumerate() {
                let p = model.predict_proba(&omega.to_owned(), x)?;
                probs.index_axis_mut(Axis(0), i).assign(&p);
            }
            PredictiveTensor::classification(probs)
        }
        LikelihoodSpec::Gaussian { precision } => {
            check_dim("regression output", 1, model.arch.output_dim())?;
            let mut means = Array2::zeros((s, n));
            for (i, omega) in samples.outer_iter().enumerate() {
                let f = model.forward(&omega.to_owned(), x)?;
                means.row_mut(i).assign(&f.column(0));
            }
            PredictiveTensor::regression(means, precision)
        }
    }
}

fn entropy<'a>(p: impl IntoIterator<Item = &'a f64>) -> f64 {
    -p.into_iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// `H̃ = H[E_ω p(y|x,ω)]` per test point.
pub fn predictive_entropy(pt: &PredictiveTensor) -> Result<Array1<f64>> {
    let mean = pt.mean_probs()?;
    Ok(mean.outer_iter().map(|row| entropy(row.iter())).collect())
}

/// `E_ω H[p(y|x,ω)]` per test point.
pub fn expected_entropy(pt: &PredictiveTensor) -> Result<Array1<f64>> {
    let probs = pt.probs()?;
    let (s, n, _) = probs.dim();
    let mut out = Array1::zeros(n);
    for sample in probs.outer_iter() {
        for (o, row) in out.iter_mut().zip(sample.outer_iter()) {
            *o += entropy(row.iter());
        }
    }
    Ok(out / s as f64)
}

/// BALD mutual information `H̃ − E_ω H[p]`, with rounding below zero clipped.
pub fn mutual_information(pt: &PredictiveTensor) -> Result<Array1<f64>> {
    let h = predictive_entropy(pt)?;
    let e = expected_entropy(pt)?;
    Ok((h - e).mapv(|v| v.max(0.0)))
}

fn check_labels(pt: &PredictiveTensor, labels: &[usize]) -> Result<usize> {
    let classes = pt.probs()?.shape()[2];
    check_dim("labels", pt.num_points(), labels.len())?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    Ok(classes)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Argmax class of the posterior-mean prediction for every test point.
pub fn predicted_labels(pt: &PredictiveTensor) -> Result<Vec<usize>> {
    Ok(pt
        .mean_probs()?
        .outer_iter()
        .map(|r| argmax(r.iter().copied()))
        .collect())
}

pub fn accuracy(pt: &PredictiveTensor, labels: &[usize]) -> Result<f64> {
    check_labels(pt, labels)?;
    let pred = predicted_labels(pt)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub nll: f64,
    /// Test points whose true-class probability was raised to [`PROB_FLOOR`].
    pub floored: usize,
}

/// Mean of `−log p̄(y_true)` over test points.
pub fn nll(pt: &PredictiveTensor, labels: &[usize]) -> Result<NllReport> {
    check_labels(pt, labels)?;
    let mean = pt.mean_probs()?;
    let mut floored = 0;
    let mut total = 0.0;
    for (row, &y) in mean.outer_iter().zip(labels) {
        let p = row[y];
        if p < PROB_FLOOR {
            floored += 1;
        }
        total -= p.max(PROB_FLOOR).ln();
    }
    Ok(NllReport {
        nll: total / labels.len().max(1) as f64,
        floored,
    })
}

/// Mean of `Σ_c (p̄_c − 1[y = c])²`, in `[0, 2]`.
pub fn brier_score(pt: &PredictiveTensor, labels: &[usize]) -> Result<f64> {
    check_labels(pt, labels)?;
    let mean = pt.mean_probs()?;
    let total: f64 = mean
        .outer_iter()
        .zip(labels)
        .map(|(row, &y)| {
            row.iter()
                .enumerate()
                .map(|(c, &p)| (p - f64::from(u8::from(c == y))).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(total / labels.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub predictive_entropy: Vec<f64>,
    pub expected_entropy: Vec<f64>,
    pub mutual_information: Vec<f64>,
    pub nll: f64,
    pub nll_floored: usize,
    pub brier: f64,
    pub accuracy: f64,
}

pub fn summarize(pt: &PredictiveTensor, labels: &[usize]) -> Result<UncertaintySummary> {
    let n = nll(pt, labels)?;
    Ok(UncertaintySummary {
        predictive_entropy: predictive_entropy(pt)?.to_vec(),
        expected_entropy: expected_entropy(pt)?.to_vec(),
        mutual_information: mutual_information(pt)?.to_vec(),
        nll: n.nll,
        nll_floored: n.floored,
        brier: brier_score(pt, labels)?,
        accuracy: accuracy(pt, labels)?,
    })
}

/// Empirical CDF as a right-continuous step function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    /// Sorted sample values.
    pub values: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        Self { values }
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Fraction of values `≤ x`; `None` for an empty CDF.
    pub fn eval(&self, x: f64) -> Option<f64> {
        if self.values.is_empty() {
            return None;
        }
        let k = self.values.partition_point(|v| *v <= x);
        Some(k as f64 / self.values.len() as f64)
    }

    /// `(value, cumulative fraction)` at each step.
    pub fn steps(&self) -> Vec<(f64, f64)> {
        let n = self.values.len() as f64;
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (*v, (i + 1) as f64 / n))
            .collect()
    }

    pub fn median(&self) -> Option<f64> {
        let n = self.values.len();
        match n {
            0 => None,
            _ if n % 2 == 1 => Some(self.values[n / 2]),
            _ => Some(0.5 * (self.values[n / 2 - 1] + self.values[n / 2])),
        }
    }
}

/// CDF of `H̃` over misclassified test points. Empty when nothing is
/// misclassified.
pub fn entropy_cdf_misclassified(pt: &PredictiveTensor, labels: &[usize]) -> Result<EmpiricalCdf> {
    check_labels(pt, labels)?;
    let h = predictive_entropy(pt)?;
    let pred = predicted_labels(pt)?;
    let wrong = h
        .iter()
        .zip(pred.iter().zip(labels))
        .filter(|(_, (p, l))| p != l)
        .map(|(h, _)| *h)
        .collect();
    Ok(EmpiricalCdf::new(wrong))
}

/// Mean MI per `(true, predicted)` cell; cells without points are blank.
#[derive(Debug, Clone, PartialEq)]
pub struct MiMatrix {
    pub sums: Array2<f64>,
    pub counts: Array2<usize>,
}

impl MiMatrix {
    pub fn classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn cell(&self, truth: usize, predicted: usize) -> Option<f64> {
        let c = self.counts[[truth, predicted]];
        (c > 0).then(|| self.sums[[truth, predicted]] / c as f64)
    }

    fn mean_cells(&self, diagonal: bool) -> Option<f64> {
        let k = self.classes();
        let vals: Vec<f64> = (0..k)
            .flat_map(|i| (0..k).map(move |j| (i, j)))
            .filter(|(i, j)| (i == j) == diagonal)
            .filter_map(|(i, j)| self.cell(i, j))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Unweighted mean over populated diagonal cells.
    pub fn mean_diagonal(&self) -> Option<f64> {
        self.mean_cells(true)
    }

    /// Unweighted mean over populated off-diagonal cells.
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        self.mean_cells(false)
    }
}

pub fn mi_confusion_matrix(pt: &PredictiveTensor, labels: &[usize]) -> Result<MiMatrix> {
    let c = check_labels(pt, labels)?;
    let mi = mutual_information(pt)?;
    let pred = predicted_labels(pt)?;
    let mut sums = Array2::zeros((c, c));
    let mut counts = Array2::zeros((c, c));
    for ((&m, &p), &y) in mi.iter().zip(&pred).zip(labels) {
        sums[[y, p]] += m;
        counts[[y, p]] += 1;
    }
    Ok(MiMatrix { sums, counts })
}

/// Regression predictive mean with epistemic and total standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionBands {
    pub mean: Vec<f64>,
    /// Sample standard deviation of the network means (n − 1 divisor).
    pub epistemic_std: Vec<f64>,
    /// `sqrt(σ_e² + 1/τ)`.
    pub total_std: Vec<f64>,
    /// False when only one sample was available; `epistemic_std` is then zero.
    pub epistemic_defined: bool,
}

impl RegressionBands {
    /// `(lower, upper)` of `mean ± k·σ`, with `σ` total or epistemic.
    pub fn band(&self, k: f64, total: bool) -> Vec<(f64, f64)> {
        let sd = if total {
            &self.total_std
        } else {
            &self.epistemic_std
        };
        self.mean
            .iter()
            .zip(sd)
            .map(|(m, s)| (m - k * s, m + k * s))
            .collect()
    }
}

pub fn regression_bands(pt: &PredictiveTensor) -> Result<RegressionBands> {
    let PredictiveTensor::Regression { means, precision } = pt else {
        return Err(Error::InvalidData(
            "expected a regression predictive, got classification".into(),
        ));
    };
    let s = means.nrows();
    let mean = means.mean_axis(Axis(0)).expect("at least one sample");
    let epistemic_defined = s >= 2;
    let var = if epistemic_defined {
        means.var_axis(Axis(0), 1.0)
    } else {
        Array1::zeros(means.ncols())
    };
    let total = var.mapv(|v| (v + 1.0 / precision).sqrt());
    Ok(RegressionBands {
        mean: mean.to_vec(),
        epistemic_std: var.mapv(f64::sqrt).to_vec(),
        total_std: total.to_vec(),
        epistemic_defined,
    })
}

/// Fraction of `targets` outside `mean ± k·σ_tot`.
pub fn fraction_outside(bands: &RegressionBands, targets: &[f64], k: f64) -> Result<f64> {
    check_dim("regression targets", bands.mean.len(), targets.len())?;
    if targets.is_empty() {
        return Err(Error::Empty("regression targets"));
    }
    let out = bands
        .band(k, true)
        .iter()
        .zip(targets)
        .filter(|((lo, hi), y)| **y < *lo || **y > *hi)
        .count();
    Ok(out as f64 / targets.len() as f64)
}

/// Fractions outside the 1σ and 2σ total bands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub outside_1sigma: f64,
    pub outside_2sigma: f64,
}

pub fn calibration(bands: &RegressionBands, targets: &[f64]) -> Result<Calibration> {
    Ok(Calibration {
        outside_1sigma: fraction_outside(bands, targets, 1.0)?,
        outside_2sigma: fraction_outside(bands, targets, 2.0)?,
    })
}
