//! Bayesian multilayer perceptrons: architecture, prior, likelihood, and
//! exact gradients of the log posterior through the [`Tape`].

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::datasets::{Dataset, Targets};
use crate::error::{check_dim, Error, Result};
use crate::numeric::{ParamVector, RngStream};

/// Fully connected network shape. Parameters are flattened layer by layer,
/// each layer as its `fan_in × fan_out` weight matrix in row-major order
/// followed by its `fan_out` biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpArchitecture {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(Error::InvalidConfig(format!(
                "an MLP needs input, at least one hidden, and output layers; got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidConfig("layer sizes must be positive".into()));
        }
        Ok(Self {
            layer_sizes,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// `(weight_offset, fan_in, fan_out)` for every layer.
    fn layout(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let start = offset;
            offset += (w[0] + 1) * w[1];
            (start, w[0], w[1])
        })
    }

    /// Borrowed weight and bias views of every layer.
    pub fn unflatten<'a>(
        &self,
        omega: &'a ParamVector,
    ) -> Result<Vec<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)>> {
        check_dim("parameter vector", self.num_params(), omega.len())?;
        let flat = omega.as_slice().expect("contiguous parameter vector");
        Ok(self
            .layout()
            .map(|(off, fan_in, fan_out)| {
                let w_end = off + fan_in * fan_out;
                let w = ArrayView2::from_shape((fan_in, fan_out), &flat[off..w_end])
                    .expect("layer shape");
                let b = ArrayView1::from(&flat[w_end..w_end + fan_out]);
                (w, b)
            })
            .collect())
    }

    /// Inverse of [`unflatten`](Self::unflatten).
    pub fn flatten(&self, layers: &[(Array2<f64>, Array1<f64>)]) -> Result<ParamVector> {
        check_dim("layer count", self.layer_sizes.len() - 1, layers.len())?;
        let mut out = Vec::with_capacity(self.num_params());
        for ((w, b), (_, fan_in, fan_out)) in layers.iter().zip(self.layout()) {
            if w.dim() != (fan_in, fan_out) || b.len() != fan_out {
                return Err(Error::InvalidConfig(format!(
                    "layer expected {fan_in}x{fan_out} weights and {fan_out} biases"
                )));
            }
            out.extend(w.iter());
            out.extend(b.iter());
        }
        Ok(Array1::from(out))
    }
}

/// Isotropic Gaussian prior `N(0, σ² I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub std: f64,
}

impl PriorSpec {
    pub fn new(std: f64) -> Result<Self> {
        if !(std.is_finite() && std > 0.0) {
            return Err(Error::InvalidConfig(format!("prior std must be positive, got {std}")));
        }
        Ok(Self { std })
    }

    pub fn precision(&self) -> f64 {
        1.0 / (self.std * self.std)
    }
}

/// Observation model for the network outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum LikelihoodSpec {
    /// `y ~ N(f(x), τ⁻¹ I)`.
    Gaussian { precision: f64 },
    /// `y ~ Categorical(softmax(f(x)))`.
    Categorical,
}

impl LikelihoodSpec {
    fn validate(&self) -> Result<()> {
        match self {
            LikelihoodSpec::Gaussian { precision } if !(precision.is_finite() && *precision > 0.0) => {
                Err(Error::InvalidConfig(format!(
                    "output precision must be positive, got {precision}"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// `Σ_i [−½ log(2πσ²) − ω_i²/(2σ²)]`.
pub fn log_prior(omega: &ParamVector, prior: &PriorSpec) -> f64 {
    let var = prior.std * prior.std;
    let norm = -0.5 * (std::f64::consts::TAU * var).ln();
    omega.len() as f64 * norm - omega.dot(omega) / (2.0 * var)
}

/// Network, prior, and likelihood together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesianMlp {
    pub arch: MlpArchitecture,
    pub prior: PriorSpec,
    pub likelihood: LikelihoodSpec,
}

struct Recorded {
    tape: Tape,
    params: Vec<(Var, Var)>,
    output: Var,
}

impl BayesianMlp {
    pub fn new(arch: MlpArchitecture, prior: PriorSpec, likelihood: LikelihoodSpec) -> Result<Self> {
        likelihood.validate()?;
        if let LikelihoodSpec::Categorical = likelihood {
            if arch.output_dim() < 2 {
                return Err(Error::InvalidConfig(
                    "categorical likelihood needs at least two outputs".into(),
                ));
            }
        }
        Ok(Self {
            arch,
            prior,
            likelihood,
        })
    }

    pub fn num_params(&self) -> usize {
        self.arch.num_params()
    }

    /// `ω₀ ~ N(0, init_std² I)`.
    pub fn init_params(&self, init_std: f64, rng: &mut RngStream) -> ParamVector {
        Array1::from_shape_fn(self.num_params(), |_| init_std * rng.normal())
    }

    fn record(&self, omega: &ParamVector, x: &Array2<f64>, track: bool) -> Result<Recorded> {
        check_dim("input features", self.arch.input_dim(), x.ncols())?;
        let layers = self.arch.unflatten(omega)?;
        let mut tape = Tape::new();
        let mut h = tape.constant(x.clone());
        let mut params = Vec::with_capacity(layers.len());
        let last = layers.len() - 1;
        for (i, (w, b)) in layers.into_iter().enumerate() {
            let b = b.insert_axis(ndarray::Axis(0)).to_owned();
            let (wv, bv) = if track {
                (tape.parameter(w.to_owned()), tape.parameter(b))
            } else {
                (tape.constant(w.to_owned()), tape.constant(b))
            };
            let z = tape.matmul(h, wv);
            h = tape.add_row(z, bv);
            if i < last {
                h = tape.activate(h, self.arch.activation);
            }
            params.push((wv, bv));
        }
        Ok(Recorded {
            tape,
            params,
            output: h,
        })
    }

    /// Network outputs, one row per input row.
    pub fn forward(&self, omega: &ParamVector, x: &Array2<f64>) -> Result<Array2<f64>> {
        let rec = self.record(omega, x, false)?;
        Ok(rec.tape.value(rec.output).clone())
    }

    /// Negative log-likelihood node plus the data-only constant term.
    fn nll_node(&self, rec: &mut Recorded, data: &Dataset) -> Result<(Var, f64)> {
        match (&self.likelihood, &data.targets) {
            (LikelihoodSpec::Gaussian { precision }, Targets::Real(y)) => {
                check_dim("regression targets", self.arch.output_dim(), y.ncols())?;
                let count = (y.nrows() * y.ncols()) as f64;
                let constant = -count * 0.5 * (precision / std::f64::consts::TAU).ln();
                let node = rec.tape.scaled_squared_error(rec.output, y.clone(), *precision);
                Ok((node, constant))
            }
            (LikelihoodSpec::Categorical, Targets::Labels { labels, .. }) => {
                let classes = self.arch.output_dim();
                if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
                    return Err(Error::LabelOutOfRange { label, classes });
                }
                let node = rec.tape.softmax_cross_entropy(rec.output, labels.clone());
                Ok((node, 0.0))
            }
            _ => Err(Error::InvalidData(
                "target kind does not match the likelihood".into(),
            )),
        }
    }

    /// `log p(Y | X, ω)` summed over the rows of `data`.
    pub fn log_likelihood(&self, omega: &ParamVector, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("likelihood data"));
        }
        let mut rec = self.record(omega, &data.x, false)?;
        let (node, constant) = self.nll_node(&mut rec, data)?;
        Ok(-(rec.tape.value(node)[[0, 0]] + constant))
    }

    /// Log-likelihood and its gradient with respect to `ω`.
    pub fn log_likelihood_grad(&self, omega: &ParamVector, data: &Dataset) -> Result<(f64, ParamVector)> {
        if data.is_empty() {
            return Err(Error::Empty("likelihood data"));
        }
        let mut rec = self.record(omega, &data.x, true)?;
        let (node, constant) = self.nll_node(&mut rec, data)?;
        let nll = rec.tape.value(node)[[0, 0]] + constant;
        let grads = rec.tape.backward(node);
        let mut out = Array1::zeros(self.num_params());
        let mut off = 0;
        for (wv, bv) in &rec.params {
            for v in [wv, bv] {
                let n = rec.tape.value(*v).len();
                let mut dst = out.slice_mut(s![off..off + n]);
                if let Some(g) = grads.get(*v) {
                    // d log-lik = −d NLL
                    dst.iter_mut().zip(g.iter()).for_each(|(d, gv)| *d = -gv);
                }
                off += n;
            }
        }
        Ok((-nll, out))
    }

    pub fn log_prior(&self, omega: &ParamVector) -> f64 {
        log_prior(omega, &self.prior)
    }

    /// `∇ log p(ω) = −ω / σ²`.
    pub fn log_prior_grad(&self, omega: &ParamVector) -> ParamVector {
        omega * (-self.prior.precision())
    }

    /// Per-row class probabilities (softmax of the outputs).
    pub fn predict_proba(&self, omega: &ParamVector, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut z = self.forward(omega, x)?;
        for mut row in z.outer_iter_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        Ok(z)
    }
}
