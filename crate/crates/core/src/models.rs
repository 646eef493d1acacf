//! Parametric models and loss families.
//!
//! Parameters are a flat vector laid out layer by layer: for each dense layer
//! the weight matrix (`fan_in x fan_out`, row-major) followed by the bias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Bindings, Leaf, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS_POS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    LinearRegression,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Elu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    /// Hidden-layer widths (mlp only).
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl ModelSpec {
    pub fn linear(input_dim: usize) -> Self {
        ModelSpec {
            family: Family::LinearRegression,
            hidden: vec![],
            activation: Activation::Elu,
            input_dim,
            output_dim: 1,
        }
    }

    pub fn logistic(input_dim: usize, classes: usize) -> Self {
        ModelSpec {
            family: Family::Logistic,
            hidden: vec![],
            activation: Activation::Elu,
            input_dim,
            output_dim: classes,
        }
    }

    /// An mlp from its full layer list, e.g. `[2, 32, 32, 2]`.
    pub fn mlp(layers: &[usize], activation: Activation) -> Self {
        let n = layers.len();
        ModelSpec {
            family: Family::Mlp,
            hidden: if n > 2 {
                layers[1..n - 1].to_vec()
            } else {
                vec![]
            },
            activation,
            input_dim: layers.first().copied().unwrap_or(0),
            output_dim: layers.last().copied().unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config(
                "input and output dims must be positive".into(),
            ));
        }
        match self.family {
            Family::Mlp if self.hidden.is_empty() || self.hidden.contains(&0) => Err(
                Error::Config("mlp needs at least one hidden layer of positive width".into()),
            ),
            Family::Logistic if self.output_dim < 2 => Err(Error::Config(
                "logistic model needs at least 2 classes".into(),
            )),
            Family::LinearRegression | Family::Logistic if !self.hidden.is_empty() => Err(
                Error::Config("hidden widths are only allowed for the mlp family".into()),
            ),
            _ => Ok(()),
        }
    }

    /// `(fan_in, fan_out)` of every dense layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        if self.family == Family::Mlp {
            widths.extend_from_slice(&self.hidden);
        }
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossFamily {
    LeastSquares,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossKind {
    pub kind: LossFamily,
    /// Positivity offset added to every loss value.
    #[serde(default = "default_eps_pos")]
    pub eps_pos: f64,
}

fn default_eps_pos() -> f64 {
    DEFAULT_EPS_POS
}

impl LossKind {
    pub fn least_squares(eps_pos: f64) -> Self {
        LossKind {
            kind: LossFamily::LeastSquares,
            eps_pos,
        }
    }

    pub fn cross_entropy(eps_pos: f64) -> Self {
        LossKind {
            kind: LossFamily::CrossEntropy,
            eps_pos,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Value(f64),
}

impl Target {
    pub fn as_f64(&self) -> f64 {
        match *self {
            Target::Class(c) => c as f64,
            Target::Value(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Target,
}

impl Sample {
    pub fn regression(x: Vec<f64>, y: f64) -> Self {
        Sample {
            x,
            y: Target::Value(y),
        }
    }

    pub fn class(x: Vec<f64>, y: usize) -> Self {
        Sample {
            x,
            y: Target::Class(y),
        }
    }
}

/// Loss value together with its gradients w.r.t. parameters and input.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub grad_params: Vec<f64>,
    pub grad_input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub loss: LossKind,
}

struct BuiltTape {
    tape: Tape,
    input: Leaf,
    layers: Vec<(Leaf, Leaf)>,
}

impl Model {
    pub fn new(spec: ModelSpec, loss: LossKind) -> Result<Self> {
        spec.validate()?;
        if loss.eps_pos < 0.0 || !loss.eps_pos.is_finite() {
            return Err(Error::Config(format!(
                "eps_pos must be >= 0, got {}",
                loss.eps_pos
            )));
        }
        if spec.family == Family::Logistic && loss.kind != LossFamily::CrossEntropy {
            return Err(Error::Config(
                "logistic model requires cross-entropy loss".into(),
            ));
        }
        if spec.family == Family::LinearRegression && loss.kind != LossFamily::LeastSquares {
            return Err(Error::Config(
                "linear regression requires least-squares loss".into(),
            ));
        }
        if loss.kind == LossFamily::LeastSquares && spec.output_dim != 1 {
            return Err(Error::Config(
                "least-squares loss needs a single output".into(),
            ));
        }
        if loss.kind == LossFamily::CrossEntropy && spec.output_dim < 2 {
            return Err(Error::Config(
                "cross-entropy needs at least 2 outputs".into(),
            ));
        }
        Ok(Model { spec, loss })
    }

    pub fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        init_params(&self.spec, seed)
    }

    fn check_sample(&self, params: &[f64], x: &[f64], y: &Target) -> Result<()> {
        self.check_shapes(params, x)?;
        match (self.loss.kind, y) {
            (LossFamily::CrossEntropy, Target::Class(c)) if *c < self.spec.output_dim => Ok(()),
            (LossFamily::CrossEntropy, t) => Err(Error::shape(
                "loss",
                format!(
                    "class label {:?} invalid for {} classes",
                    t, self.spec.output_dim
                ),
            )),
            (LossFamily::LeastSquares, _) => Ok(()),
        }
    }

    fn check_shapes(&self, params: &[f64], x: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::shape(
                "loss",
                format!(
                    "expected {} params, got {}",
                    self.num_params(),
                    params.len()
                ),
            ));
        }
        if x.len() != self.spec.input_dim {
            return Err(Error::shape(
                "loss",
                format!(
                    "expected input dim {}, got {}",
                    self.spec.input_dim,
                    x.len()
                ),
            ));
        }
        Ok(())
    }

    fn forward_graph(&self, tape: &mut Tape) -> (Leaf, Vec<(Leaf, Leaf)>, Var) {
        let input = tape.input("x");
        let mut h = tape.leaf_var(input);
        let layers = self.spec.layers();
        let mut leaves = Vec::with_capacity(layers.len());
        for (i, _) in layers.iter().enumerate() {
            let w = tape.param(&format!("w{i}"));
            let b = tape.param(&format!("b{i}"));
            let (wv, bv) = (tape.leaf_var(w), tape.leaf_var(b));
            let z = tape.matmul(h, wv);
            let z = tape.add(z, bv);
            h = if i + 1 < layers.len() {
                match self.spec.activation {
                    Activation::Elu => tape.elu(z),
                    Activation::Relu => tape.relu(z),
                }
            } else {
                z
            };
            leaves.push((w, b));
        }
        (input, leaves, h)
    }

    fn build(&self, y: &Target) -> BuiltTape {
        let mut tape = Tape::new();
        let (input, layers, out) = self.forward_graph(&mut tape);
        let base = match (self.loss.kind, y) {
            (LossFamily::CrossEntropy, Target::Class(c)) => tape.softmax_cross_entropy(out, *c),
            (LossFamily::CrossEntropy, Target::Value(v)) => {
                tape.softmax_cross_entropy(out, *v as usize)
            }
            (LossFamily::LeastSquares, t) => {
                let target = t.as_f64();
                let ty = tape.constant(Tensor::vector(vec![target; self.spec.output_dim]));
                let r = tape.sub(out, ty);
                tape.squared_norm(r)
            }
        };
        let outv = if self.loss.eps_pos != 0.0 {
            let e = tape.constant(Tensor::scalar(self.loss.eps_pos));
            tape.add(base, e)
        } else {
            base
        };
        tape.set_output(outv);
        BuiltTape {
            tape,
            input,
            layers,
        }
    }

    fn bind(&self, built: &BuiltTape, params: &[f64], x: &[f64]) -> Result<Bindings> {
        let mut b = Bindings::with_capacity(1 + 2 * built.layers.len());
        b.insert(built.input, Tensor::vector(x.to_vec()));
        let mut off = 0;
        for (&(w, bias), (fi, fo)) in built.layers.iter().zip(self.spec.layers()) {
            b.insert(
                w,
                Tensor::matrix(fi, fo, params[off..off + fi * fo].to_vec())?,
            );
            off += fi * fo;
            b.insert(bias, Tensor::vector(params[off..off + fo].to_vec()));
            off += fo;
        }
        Ok(b)
    }

    /// Raw outputs (regression values or class logits).
    pub fn predict(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_shapes(params, x)?;
        let mut out = x.to_vec();
        let layers = self.spec.layers();
        let mut off = 0;
        for (i, (fi, fo)) in layers.iter().copied().enumerate() {
            let w = &params[off..off + fi * fo];
            off += fi * fo;
            let b = &params[off..off + fo];
            off += fo;
            let mut z = b.to_vec();
            for (p, &xv) in out.iter().enumerate() {
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj += xv * w[p * fo + j];
                }
            }
            if i + 1 < layers.len() {
                for v in &mut z {
                    *v = match self.spec.activation {
                        Activation::Elu => {
                            if *v > 0.0 {
                                *v
                            } else {
                                v.exp_m1()
                            }
                        }
                        Activation::Relu => v.max(0.0),
                    };
                }
            }
            out = z;
        }
        Ok(out)
    }

    /// Predicted class index (argmax of logits; first wins on ties).
    pub fn classify(&self, params: &[f64], x: &[f64]) -> Result<usize> {
        let z = self.predict(params, x)?;
        Ok(argmax(&z))
    }

    pub fn loss(&self, params: &[f64], sample: &Sample) -> Result<f64> {
        self.loss_at(params, &sample.x, &sample.y)
    }

    /// Loss with the features replaced by `x` and the target kept.
    pub fn loss_at(&self, params: &[f64], x: &[f64], y: &Target) -> Result<f64> {
        self.check_sample(params, x, y)?;
        let built = self.build(y);
        let v = built.tape.forward(&self.bind(&built, params, x)?)?;
        finite_or(v, x)
    }

    /// Loss plus gradients w.r.t. both parameters and features, evaluated at features `x`.
    pub fn loss_grads(&self, params: &[f64], x: &[f64], y: &Target) -> Result<LossEval> {
        self.check_sample(params, x, y)?;
        let built = self.build(y);
        let b = self.bind(&built, params, x)?;
        let mut wrt = vec![built.input];
        for &(w, bias) in &built.layers {
            wrt.push(w);
            wrt.push(bias);
        }
        let (value, grads) = built.tape.value_and_grad(&b, &wrt)?;
        let value = finite_or(value, x)?;
        let mut grad_params = Vec::with_capacity(params.len());
        for &(w, bias) in &built.layers {
            grad_params.extend_from_slice(grads[&w].data());
            grad_params.extend_from_slice(grads[&bias].data());
        }
        let grad_input = grads
            .get(&built.input)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; x.len()]);
        Ok(LossEval {
            value,
            grad_params,
            grad_input,
        })
    }
}

fn finite_or(v: f64, x: &[f64]) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("loss is {v} at sample x = {x:?}")))
    }
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Deterministic initialization: weights `N(0,1) / sqrt(fan_in)`, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Vec::with_capacity(spec.num_params());
    for (fi, fo) in spec.layers() {
        let scale = 1.0 / (fi as f64).sqrt();
        for _ in 0..fi * fo {
            let z: f64 = StandardNormal.sample(&mut rng);
            p.push(z * scale);
        }
        p.extend(std::iter::repeat_n(0.0, fo));
    }
    p
}

/// Robust least-squares instance `min ||(A0 + xi A1) theta - b||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RlsProblem {
    pub a0: Tensor,
    pub a1: Tensor,
    pub b: Vec<f64>,
}

impl RlsProblem {
    pub fn new(a0: Tensor, a1: Tensor, b: Vec<f64>) -> Result<Self> {
        let (m, n) = match a0.shape() {
            [m, n] => (*m, *n),
            s => {
                return Err(Error::shape(
                    "rls",
                    format!("A0 must be a matrix, got {s:?}"),
                ))
            }
        };
        if a1.shape() != [m, n] {
            return Err(Error::shape(
                "rls",
                format!("A1 shape {:?} differs from A0 {:?}", a1.shape(), a0.shape()),
            ));
        }
        if b.len() != m {
            return Err(Error::shape(
                "rls",
                format!("b has {} rows, A0 has {m}", b.len()),
            ));
        }
        Ok(RlsProblem { a0, a1, b })
    }

    pub fn dim(&self) -> usize {
        self.a0.shape()[1]
    }

    pub fn loss(&self, theta: &[f64], xi: f64) -> Result<f64> {
        rls_loss(theta, xi, &self.a0, &self.a1, &self.b)
    }

    /// Value, gradient in theta and derivative in xi.
    pub fn loss_grads(&self, theta: &[f64], xi: f64) -> Result<(f64, Vec<f64>, f64)> {
        rls_loss_grads(theta, xi, &self.a0, &self.a1, &self.b)
    }
}

fn rls_tape(a0: &Tensor, a1: &Tensor, b: &[f64]) -> (Tape, Leaf, Leaf) {
    let mut t = Tape::new();
    let theta = t.param("theta");
    let xi = t.input("xi");
    let (tv, xv) = (t.leaf_var(theta), t.leaf_var(xi));
    let a0v = t.constant(a0.clone());
    let a1v = t.constant(a1.clone());
    let p0 = t.matmul(a0v, tv);
    let p1 = t.matmul(a1v, tv);
    let p1 = t.mul(xv, p1);
    let pred = t.add(p0, p1);
    let bv = t.constant(Tensor::vector(b.to_vec()));
    let r = t.sub(pred, bv);
    let out = t.squared_norm(r);
    t.set_output(out);
    (t, theta, xi)
}

fn rls_check(theta: &[f64], a0: &Tensor, a1: &Tensor, b: &[f64]) -> Result<()> {
    match a0.shape() {
        [m, n] if *n == theta.len() && *m == b.len() && a1.shape() == a0.shape() => Ok(()),
        _ => Err(Error::shape(
            "rls_loss",
            format!(
                "A0 {:?}, A1 {:?}, theta {}, b {}",
                a0.shape(),
                a1.shape(),
                theta.len(),
                b.len()
            ),
        )),
    }
}

/// `||(A0 + xi A1) theta - b||^2`.
pub fn rls_loss(theta: &[f64], xi: f64, a0: &Tensor, a1: &Tensor, b: &[f64]) -> Result<f64> {
    rls_check(theta, a0, a1, b)?;
    let (t, th, x) = rls_tape(a0, a1, b);
    let mut bind = Bindings::new();
    bind.insert(th, Tensor::vector(theta.to_vec()));
    bind.insert(x, Tensor::scalar(xi));
    t.forward(&bind)
}

pub fn rls_loss_grads(
    theta: &[f64],
    xi: f64,
    a0: &Tensor,
    a1: &Tensor,
    b: &[f64],
) -> Result<(f64, Vec<f64>, f64)> {
    rls_check(theta, a0, a1, b)?;
    let (t, th, x) = rls_tape(a0, a1, b);
    let mut bind = Bindings::new();
    bind.insert(th, Tensor::vector(theta.to_vec()));
    bind.insert(x, Tensor::scalar(xi));
    let (v, g) = t.value_and_grad(&bind, &[th, x])?;
    Ok((v, g[&th].data().to_vec(), g[&x].data()[0]))
}
