//! Reverse-mode differentiation over dense matrix primitives.
//!
//! A [`Tape`] records every operation of a forward pass as a node whose value
//! is computed eagerly. [`Tape::backward`] then walks the nodes in exact
//! reverse recording order, which is a reverse topological order because a
//! node can only reference nodes recorded before it.

use ndarray::{Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Selu,
    Tanh,
    Relu,
}

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// `tanh` via one `exp` away from the origin, where it is about twice as fast
/// as libm's `tanh` and within 2 ulp of it.
fn tanh(x: f64) -> f64 {
    let a = x.abs();
    if a < 0.5 {
        return x.tanh();
    }
    (1.0 - 2.0 / ((2.0 * a).exp() + 1.0)).copysign(x)
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
                }
            }
            Activation::Tanh => tanh(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA
                } else {
                    y + SELU_LAMBDA * SELU_ALPHA
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Activate(Var, Activation),
    /// `Σ (τ/2)(f − y)²`; the constant part of the Gaussian NLL is added
    /// by the caller since it has zero gradient.
    ScaledSquaredError {
        pred: Var,
        target: Array2<f64>,
        precision: f64,
    },
    /// `Σ_n −log softmax(f_n)[y_n]`; softmax rows cached for backward.
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Array2<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Single-use recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence
    /// the output or was recorded as a constant.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn parameter(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input with zero gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// Adds the `1 × k` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        assert_eq!(self.value(bias).nrows(), 1, "bias must be a single row");
        let value = self.value(x) + self.value(bias);
        let rg = self.needs(x) || self.needs(bias);
        self.push(value, Op::AddRow(x, bias), rg)
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        let value = self.value(x).mapv(|v| act.apply(v));
        let rg = self.needs(x);
        self.push(value, Op::Activate(x, act), rg)
    }

    /// Scalar `Σ (τ/2)(pred − target)²`.
    pub fn scaled_squared_error(&mut self, pred: Var, target: Array2<f64>, precision: f64) -> Var {
        assert_eq!(self.value(pred).dim(), target.dim(), "target shape");
        let sse: f64 = Zip::from(self.value(pred))
            .and(&target)
            .fold(0.0, |acc, f, y| acc + (f - y) * (f - y));
        let value = Array2::from_elem((1, 1), 0.5 * precision * sse);
        let rg = self.needs(pred);
        self.push(
            value,
            Op::ScaledSquaredError {
                pred,
                target,
                precision,
            },
            rg,
        )
    }

    /// Scalar categorical negative log-likelihood of integer labels, using a
    /// max-shifted log-sum-exp so large logits stay finite.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), labels.len(), "one label per row");
        let mut probs = Array2::zeros(z.dim());
        let mut total = 0.0;
        for ((row, mut prow), &label) in z.outer_iter().zip(probs.outer_iter_mut()).zip(&labels) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for (p, &v) in prow.iter_mut().zip(row.iter()) {
                *p = (v - max).exp();
                sum += *p;
            }
            prow.mapv_inplace(|p| p / sum);
            total += max + sum.ln() - row[label];
        }
        let rg = self.needs(logits);
        self.push(
            Array2::from_elem((1, 1), total),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            },
            rg,
        )
    }

    /// Accumulates `d output / d node` for every node, seeding the scalar
    /// `output` with 1.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.needs(*bias) {
                        accumulate(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g.clone());
                    }
                }
                Op::Activate(x, act) => {
                    let mut dx = g.clone();
                    Zip::from(&mut dx)
                        .and(self.value(*x))
                        .and(&node.value)
                        .for_each(|d, &xv, &yv| *d *= act.derivative(xv, yv));
                    accumulate(&mut grads, *x, dx);
                }
                Op::ScaledSquaredError {
                    pred,
                    target,
                    precision,
                } => {
                    let scale = g[[0, 0]] * precision;
                    let d = (self.value(*pred) - target) * scale;
                    accumulate(&mut grads, *pred, d);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g[[0, 0]];
                    let mut d = probs.clone();
                    for (mut row, &label) in d.outer_iter_mut().zip(labels) {
                        row[label] -= 1.0;
                    }
                    d *= scale;
                    accumulate(&mut grads, *logits, d);
                }
            }
            // keep leaf adjoints for the caller
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, d: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &d,
        slot @ None => *slot = Some(d),
    }
}
