//! Chain-quality metrics: acceptance rate, effective sample size,
//! log-posterior traces and cumulative ensemble accuracy.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::datasets::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::model::BayesianMlp;
use crate::sampler::Chain;
use crate::uncertainty::{argmax, PredictiveTensor};

/// Identifier of the ESS estimator, stored next to every reported value.
pub const ESS_METHOD: &str = "fft-autocovariance/geyer-initial-monotone-sequence";

/// Fraction of `true` flags.
pub fn acceptance_rate(flags: &[bool]) -> Result<f64> {
    if flags.is_empty() {
        return Err(Error::Empty("accept flags"));
    }
    Ok(flags.iter().filter(|a| **a).count() as f64 / flags.len() as f64)
}

/// Acceptance over every post-burn proposal, thinned ones included.
pub fn chain_acceptance_rate(chain: &Chain) -> Result<f64> {
    let mh = chain
        .mh
        .as_ref()
        .ok_or_else(|| Error::InvalidData(format!("{} chains have no accept step", chain.scheme)))?;
    if mh.proposals == 0 {
        return Err(Error::Empty("post-burn proposals"));
    }
    Ok(mh.accepted as f64 / mh.proposals as f64)
}

/// Normalised autocorrelations `ρ̂_0..ρ̂_{S−1}` from the biased
/// autocovariance, via zero-padded FFT. `None` for a constant series.
pub fn autocorrelation(series: ArrayView1<f64>, planner: &mut FftPlanner<f64>) -> Option<Vec<f64>> {
    let n = series.len();
    let mean = series.mean()?;
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = series
        .iter()
        .map(|x| Complex::new(x - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in &mut buf {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let c0 = buf[0].re;
    if !(c0 > 0.0) || !c0.is_finite() {
        return None;
    }
    // the scale factors (1/size, 1/n) cancel in the ratio
    Some(buf[..n].iter().map(|c| c.re / c0).collect())
}

/// ESS of one scalar series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesEss {
    /// Reported value, clipped to `(0, S]`.
    pub ess: f64,
    /// Unclipped estimate; exceeds `S` for antithetic series and is
    /// infinite when the integrated autocorrelation time is not positive.
    pub raw: f64,
    /// The series had zero variance; `ess` is then `S`.
    pub degenerate: bool,
}

fn ess_with(series: ArrayView1<f64>, planner: &mut FftPlanner<f64>) -> Result<SeriesEss> {
    let s = series.len();
    if s < 4 {
        return Err(Error::InvalidData(format!("ESS needs at least 4 samples, got {s}")));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("ESS of a non-finite series".into()));
    }
    let Some(rho) = autocorrelation(series, planner) else {
        return Ok(SeriesEss {
            ess: s as f64,
            raw: s as f64,
            degenerate: true,
        });
    };
    // Geyer: sum pairs Γ_k = ρ_{2k} + ρ_{2k+1} while they stay positive,
    // each capped by its predecessor (initial monotone sequence)
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < s {
        let gamma = rho[2 * k] + rho[2 * k + 1];
        if !(gamma > 0.0) {
            break;
        }
        prev = gamma.min(prev);
        sum += prev;
        k += 1;
    }
    let tau = -1.0 + 2.0 * sum;
    let raw = if tau > 0.0 { s as f64 / tau } else { f64::INFINITY };
    Ok(SeriesEss {
        ess: raw.min(s as f64).max(f64::MIN_POSITIVE),
        raw,
        degenerate: false,
    })
}

pub fn ess(series: ArrayView1<f64>) -> Result<SeriesEss> {
    ess_with(series, &mut FftPlanner::new())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssReport {
    pub per_parameter_ess: Vec<f64>,
    pub mean_ess: f64,
    pub method: String,
    /// Coordinates with zero variance (reported as ESS = S).
    pub degenerate: usize,
}

/// ESS of every column of `samples` (`S × d`) and their arithmetic mean.
pub fn mean_ess(samples: ArrayView2<f64>) -> Result<EssReport> {
    if samples.ncols() == 0 {
        return Err(Error::Empty("parameter coordinates"));
    }
    let mut planner = FftPlanner::new();
    let mut per = Vec::with_capacity(samples.ncols());
    let mut degenerate = 0;
    let mut column = Array1::zeros(samples.nrows());
    for col in samples.axis_iter(Axis(1)) {
        column.assign(&col);
        let e = ess_with(column.view(), &mut planner)?;
        degenerate += usize::from(e.degenerate);
        per.push(e.ess);
    }
    let mean_ess = per.iter().sum::<f64>() / per.len() as f64;
    Ok(EssReport {
        per_parameter_ess: per,
        mean_ess,
        method: ESS_METHOD.to_string(),
        degenerate,
    })
}

pub fn chain_mean_ess(chain: &Chain) -> Result<EssReport> {
    mean_ess(chain.samples.view())
}

/// Stored unnormalised training log-posterior of each retained sample.
pub fn log_posterior_trace(chain: &Chain) -> Result<&[f64]> {
    if chain.log_posterior.len() != chain.len() {
        return Err(Error::InvalidData("chain has no log-posterior metadata".into()));
    }
    Ok(&chain.log_posterior)
}

/// `log p(ω_s) + log p(Y|X, ω_s)` on another dataset, e.g. validation data.
pub fn log_posterior_trace_on(model: &BayesianMlp, chain: &Chain, data: &Dataset) -> Result<Vec<f64>> {
    chain
        .samples
        .outer_iter()
        .map(|w| {
            let w = w.to_owned();
            Ok(model.log_prior(&w) + model.log_likelihood(&w, data)?)
        })
        .collect()
}

/// Least-squares slope of window means against window index, with a
/// two-sided t-test of zero slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendTest {
    pub slope: f64,
    pub t_statistic: f64,
    pub p_value: f64,
    pub windows: usize,
}

pub fn trace_trend(trace: &[f64], window: usize) -> Result<TrendTest> {
    if window == 0 {
        return Err(Error::InvalidConfig("window must be positive".into()));
    }
    let means: Vec<f64> = trace
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect();
    let k = means.len();
    if k < 3 {
        return Err(Error::InvalidData(format!(
            "trend test needs at least 3 full windows, got {k}"
        )));
    }
    let xbar = (k - 1) as f64 / 2.0;
    let ybar = means.iter().sum::<f64>() / k as f64;
    let sxx: f64 = (0..k).map(|i| (i as f64 - xbar).powi(2)).sum();
    let sxy: f64 = means.iter().enumerate().map(|(i, y)| (i as f64 - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let rss: f64 = means
        .iter()
        .enumerate()
        .map(|(i, y)| (y - ybar - slope * (i as f64 - xbar)).powi(2))
        .sum();
    let dof = (k - 2) as f64;
    let se = (rss / dof / sxx).sqrt();
    let (t, p) = if se > 0.0 {
        let t = slope / se;
        let dist = StudentsT::new(0.0, 1.0, dof).expect("positive dof");
        (t, 2.0 * (1.0 - dist.cdf(t.abs())))
    } else if slope == 0.0 {
        (0.0, 1.0)
    } else {
        (f64::INFINITY.copysign(slope), 0.0)
    };
    Ok(TrendTest {
        slope,
        t_statistic: t,
        p_value: p,
        windows: k,
    })
}

/// One-sample Kolmogorov–Smirnov test against `N(mean, std²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsTest {
    pub statistic: f64,
    /// Sample count used for the p-value (e.g. an ESS for correlated draws).
    pub effective_n: f64,
    pub p_value: f64,
}

/// Asymptotic Kolmogorov tail `Q(λ) = 2 Σ (−1)^{k−1} e^{−2k²λ²}`.
fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// KS statistic over all draws with the p-value computed at `effective_n`
/// (Stephens' small-sample correction applied).
pub fn ks_test_normal(draws: &[f64], mean: f64, std: f64, effective_n: f64) -> Result<KsTest> {
    if draws.is_empty() {
        return Err(Error::Empty("KS draws"));
    }
    let dist = Normal::new(mean, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut x = draws.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let statistic = x.iter().enumerate().fold(0.0f64, |d, (i, v)| {
        let f = dist.cdf(*v);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    });
    let ne = effective_n.max(1.0);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * statistic;
    Ok(KsTest {
        statistic,
        effective_n: ne,
        p_value: kolmogorov_tail(lambda),
    })
}

/// Entry `s` is the accuracy of the ensemble built from the first `s + 1`
/// samples: `argmax_c` of the running mean probability.
pub fn cumulative_accuracy(pt: &PredictiveTensor, labels: &[usize]) -> Result<Vec<f64>> {
    let probs = pt.probs()?;
    let (_, n, c) = probs.dim();
    check_dim("labels", n, labels.len())?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label: bad, classes: c });
    }
    if n == 0 {
        return Err(Error::Empty("test points"));
    }
    let mut running = ndarray::Array2::<f64>::zeros((n, c));
    let mut curve = Vec::with_capacity(probs.shape()[0]);
    for sample in probs.outer_iter() {
        running += &sample;
        let hits = running
            .outer_iter()
            .zip(labels)
            .filter(|(row, &y)| argmax(row.iter().copied()) == y)
            .count();
        curve.push(hits as f64 / n as f64);
    }
    Ok(curve)
}

/// Per-chain entry of a diagnostics summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub chain_index: usize,
    /// `None` for samplers without an accept step.
    pub acceptance_rate: Option<f64>,
    pub mean_ess: f64,
    pub num_divergences: usize,
    pub retained: usize,
    pub degenerate_coordinates: usize,
}

/// Aggregate over chains of one scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub scheme: String,
    /// Mean over chains; `None` unless every chain has an accept step.
    pub acceptance_rate: Option<f64>,
    pub acceptance_rate_std: Option<f64>,
    pub mean_ess: f64,
    pub ess_method: String,
    pub num_divergences: usize,
    pub chains: Vec<ChainDiagnostics>,
}

pub fn diagnose_chain(chain: &Chain) -> Result<ChainDiagnostics> {
    let report = chain_mean_ess(chain)?;
    Ok(ChainDiagnostics {
        chain_index: chain.chain_index,
        acceptance_rate: match chain.mh {
            Some(_) => Some(chain_acceptance_rate(chain)?),
            None => None,
        },
        mean_ess: report.mean_ess,
        num_divergences: chain.divergences,
        retained: chain.len(),
        degenerate_coordinates: report.degenerate,
    })
}

/// Combines per-chain entries; means are over chains, the standard
/// deviation uses the n − 1 divisor.
pub fn summarize(scheme: &str, chains: Vec<ChainDiagnostics>) -> Result<DiagnosticsSummary> {
    if chains.is_empty() {
        return Err(Error::Empty("chains"));
    }
    let acc: Option<Array1<f64>> = chains.iter().map(|c| c.acceptance_rate).collect();
    let k = chains.len() as f64;
    Ok(DiagnosticsSummary {
        scheme: scheme.to_string(),
        acceptance_rate: acc.as_ref().and_then(|a| a.mean()),
        acceptance_rate_std: acc.map(|a| if a.len() > 1 { a.std(1.0) } else { 0.0 }),
        mean_ess: chains.iter().map(|c| c.mean_ess).sum::<f64>() / k,
        ess_method: ESS_METHOD.to_string(),
        num_divergences: chains.iter().map(|c| c.num_divergences).sum(),
        chains,
    })
}
