//! Recorded scalar expressions with reverse-mode differentiation.
//!
//! A [`Tape`] is built once per evaluation by pushing primitive operations;
//! every operand is created before the node that consumes it, so the node list
//! is already in topological order. Leaves are symbolic: their values are
//! supplied through [`Bindings`] at [`Tape::forward`] / [`Tape::backward`] time.
//!
//! ```
//! use arks_core::tape::{Bindings, Tape};
//! use arks_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.input("x");
//! let xv = tape.leaf_var(x);
//! let y = tape.mul(xv, xv);
//! tape.set_output(y);
//!
//! let mut b = Bindings::new();
//! b.insert(x, Tensor::scalar(3.0));
//! assert_eq!(tape.forward(&b).unwrap(), 9.0);
//! assert_eq!(tape.backward(&b, &[x]).unwrap()[&x].data(), &[6.0]);
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, matmul_dims, Tensor};

/// Handle to a symbolic leaf (parameter or input).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Leaf(usize);

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Param,
    Input,
}

#[derive(Debug, Clone)]
pub struct LeafInfo {
    pub name: String,
    pub kind: LeafKind,
}

pub type Bindings = HashMap<Leaf, Tensor>;

#[derive(Debug, Clone)]
enum Op {
    Leaf(Leaf),
    Const(Tensor),
    Add(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Sum(Var),
    Mean(Var),
    Elu(Var),
    Relu(Var),
    SoftmaxCrossEntropy(Var, usize),
    SquaredNorm(Var),
    L1Norm(Var),
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Op>,
    leaves: Vec<LeafInfo>,
    output: Option<Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> Var {
        self.nodes.push(op);
        Var(self.nodes.len() - 1)
    }

    fn new_leaf(&mut self, name: &str, kind: LeafKind) -> Leaf {
        self.leaves.push(LeafInfo {
            name: name.to_string(),
            kind,
        });
        Leaf(self.leaves.len() - 1)
    }

    pub fn param(&mut self, name: &str) -> Leaf {
        self.new_leaf(name, LeafKind::Param)
    }

    pub fn input(&mut self, name: &str) -> Leaf {
        self.new_leaf(name, LeafKind::Input)
    }

    pub fn leaf_info(&self, leaf: Leaf) -> &LeafInfo {
        &self.leaves[leaf.0]
    }

    pub fn leaves(&self) -> impl Iterator<Item = (Leaf, &LeafInfo)> {
        self.leaves.iter().enumerate().map(|(i, l)| (Leaf(i), l))
    }

    /// Records a read of `leaf`. May be called more than once per leaf.
    pub fn leaf_var(&mut self, leaf: Leaf) -> Var {
        self.push(Op::Leaf(leaf))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Const(t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    /// Elementwise product; either side may be a single-entry tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = self.constant(Tensor::scalar(c));
        self.mul(k, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a, b))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.push(Op::Log(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::Mean(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.push(Op::Elu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.push(Op::Relu(a))
    }

    /// `logsumexp(logits) - logits[label]` for a single row of logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        self.push(Op::SoftmaxCrossEntropy(logits, label))
    }

    pub fn squared_norm(&mut self, a: Var) -> Var {
        self.push(Op::SquaredNorm(a))
    }

    pub fn l1_norm(&mut self, a: Var) -> Var {
        self.push(Op::L1Norm(a))
    }

    /// Marks the output node. Defaults to the last recorded node.
    pub fn set_output(&mut self, v: Var) {
        self.output = Some(v);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn output_var(&self) -> Result<Var> {
        match self.output {
            Some(v) => Ok(v),
            None if !self.nodes.is_empty() => Ok(Var(self.nodes.len() - 1)),
            None => Err(Error::Config("empty tape has no output".into())),
        }
    }

    fn eval_all(&self, bindings: &Bindings) -> Result<Vec<Tensor>> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for op in &self.nodes {
            let v = match op {
                Op::Leaf(l) => bindings.get(l).cloned().ok_or_else(|| {
                    Error::Config(format!("leaf '{}' is not bound", self.leaves[l.0].name))
                })?,
                Op::Const(t) => t.clone(),
                Op::Add(a, b) => {
                    let (x, y) = (&vals[a.0], &vals[b.0]);
                    binary(x, y, "add", |p, q| p + q)?
                }
                Op::Mul(a, b) => {
                    let (x, y) = (&vals[a.0], &vals[b.0]);
                    binary(x, y, "mul", |p, q| p * q)?
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (&vals[a.0], &vals[b.0]);
                    let (m, k, n, shape) = matmul_dims(x.shape(), y.shape())?;
                    Tensor::new(shape, gemm(x.data(), y.data(), m, k, n))?
                }
                Op::Exp(a) => vals[a.0].map(f64::exp),
                Op::Log(a) => {
                    let x = &vals[a.0];
                    if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                        return Err(Error::Domain(format!("log of non-positive value {bad}")));
                    }
                    x.map(f64::ln)
                }
                Op::Neg(a) => vals[a.0].map(|v| -v),
                Op::Sum(a) => Tensor::scalar(vals[a.0].data().iter().sum()),
                Op::Mean(a) => {
                    let x = &vals[a.0];
                    if x.is_empty() {
                        return Err(Error::shape("mean", "empty tensor"));
                    }
                    Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
                }
                Op::Elu(a) => vals[a.0].map(elu),
                Op::Relu(a) => vals[a.0].map(|v| v.max(0.0)),
                Op::SoftmaxCrossEntropy(a, label) => {
                    let z = vals[a.0].data();
                    check_logits(z, *label)?;
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    Tensor::scalar(lse - z[*label])
                }
                Op::SquaredNorm(a) => Tensor::scalar(vals[a.0].data().iter().map(|v| v * v).sum()),
                Op::L1Norm(a) => Tensor::scalar(vals[a.0].data().iter().map(|v| v.abs()).sum()),
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Scalar value of the output node.
    pub fn forward(&self, bindings: &Bindings) -> Result<f64> {
        let out = self.output_var()?;
        let vals = self.eval_all(bindings)?;
        scalar_of(&vals[out.0])
    }

    /// Gradient of the output with respect to each requested leaf.
    ///
    /// Leaves the output does not depend on are left out of the map.
    pub fn backward(&self, bindings: &Bindings, wrt: &[Leaf]) -> Result<HashMap<Leaf, Tensor>> {
        Ok(self.value_and_grad(bindings, wrt)?.1)
    }

    pub fn value_and_grad(
        &self,
        bindings: &Bindings,
        wrt: &[Leaf],
    ) -> Result<(f64, HashMap<Leaf, Tensor>)> {
        let out = self.output_var()?;
        let vals = self.eval_all(bindings)?;
        let value = scalar_of(&vals[out.0])?;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::new(vals[out.0].shape().to_vec(), vec![1.0])?);
        let mut result: HashMap<Leaf, Tensor> = HashMap::new();

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx] {
                Op::Leaf(l) => {
                    if wrt.contains(l) {
                        match result.get_mut(l) {
                            Some(acc) => add_into(acc, &g),
                            None => {
                                result.insert(*l, g);
                            }
                        }
                    }
                }
                Op::Const(_) => {}
                Op::Add(a, b) => {
                    let ga = reduce_to(&g, &vals[a.0]);
                    let gb = reduce_to(&g, &vals[b.0]);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (&vals[a.0], &vals[b.0]);
                    let ga = reduce_to(&binary(&g, y, "mul", |p, q| p * q)?, x);
                    let gb = reduce_to(&binary(&g, x, "mul", |p, q| p * q)?, y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (&vals[a.0], &vals[b.0]);
                    let (m, k, n, _) = matmul_dims(x.shape(), y.shape())?;
                    // dA = G B^T, dB = A^T G with G viewed as m x n
                    let gd = g.data();
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    let (xd, yd) = (x.data(), y.data());
                    for i in 0..m {
                        for j in 0..n {
                            let gij = gd[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gij * yd[p * n + j];
                                gb[p * n + j] += xd[i * k + p] * gij;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(x.shape().to_vec(), ga)?);
                    accumulate(&mut grads, *b, Tensor::new(y.shape().to_vec(), gb)?);
                }
                Op::Exp(a) => {
                    let out_v = vals[idx].data();
                    let d = zip_map(&g, out_v, |gi, e| gi * e);
                    accumulate(&mut grads, *a, d);
                }
                Op::Log(a) => {
                    let d = zip_map(&g, vals[a.0].data(), |gi, x| gi / x);
                    accumulate(&mut grads, *a, d);
                }
                Op::Neg(a) => accumulate(&mut grads, *a, g.map(|v| -v)),
                Op::Sum(a) => {
                    let x = &vals[a.0];
                    let s = g.data()[0];
                    accumulate(&mut grads, *a, x.map(|_| s));
                }
                Op::Mean(a) => {
                    let x = &vals[a.0];
                    let s = g.data()[0] / x.len() as f64;
                    accumulate(&mut grads, *a, x.map(|_| s));
                }
                Op::Elu(a) => {
                    let d = zip_map(&g, vals[a.0].data(), |gi, x| {
                        if x > 0.0 {
                            gi
                        } else {
                            gi * x.exp()
                        }
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = zip_map(&g, vals[a.0].data(), |gi, x| if x > 0.0 { gi } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxCrossEntropy(a, label) => {
                    let x = &vals[a.0];
                    let z = x.data();
                    let s = g.data()[0];
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                    let tot: f64 = e.iter().sum();
                    let mut d: Vec<f64> = e.iter().map(|v| s * v / tot).collect();
                    d[*label] -= s;
                    accumulate(&mut grads, *a, Tensor::new(x.shape().to_vec(), d)?);
                }
                Op::SquaredNorm(a) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *a, vals[a.0].map(|v| 2.0 * s * v));
                }
                Op::L1Norm(a) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *a, vals[a.0].map(|v| s * sign0(v)));
                }
            }
        }
        Ok((value, result))
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_logits(z: &[f64], label: usize) -> Result<()> {
    if label >= z.len() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("label {} out of range for {} logits", label, z.len()),
        ));
    }
    Ok(())
}

fn scalar_of(t: &Tensor) -> Result<f64> {
    if !t.is_scalar() {
        return Err(Error::shape(
            "output",
            format!("expected a scalar output, got shape {:?}", t.shape()),
        ));
    }
    Ok(t.data()[0])
}

fn binary(x: &Tensor, y: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if x.shape() == y.shape() {
        let d = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        return Tensor::new(x.shape().to_vec(), d);
    }
    if y.is_scalar() {
        let q = y.data()[0];
        return Ok(x.map(|p| f(p, q)));
    }
    if x.is_scalar() {
        let p = x.data()[0];
        return Ok(y.map(|q| f(p, q)));
    }
    Err(Error::shape(
        op,
        format!("{:?} vs {:?}", x.shape(), y.shape()),
    ))
}

/// Sums a broadcast gradient back down to the operand's shape.
fn reduce_to(g: &Tensor, operand: &Tensor) -> Tensor {
    if g.shape() == operand.shape() {
        g.clone()
    } else if operand.is_scalar() {
        Tensor::new(operand.shape().to_vec(), vec![g.data().iter().sum()]).expect("scalar")
    } else {
        // operand was the full-size side; g came from a scalar output broadcast
        let s = g.data()[0];
        operand.map(|_| s)
    }
}

fn zip_map(g: &Tensor, x: &[f64], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let d = g.data().iter().zip(x).map(|(&gi, &xi)| f(gi, xi)).collect();
    Tensor::new(g.shape().to_vec(), d).expect("same length")
}

fn add_into(acc: &mut Tensor, g: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => add_into(acc, &g),
        slot @ None => *slot = Some(g),
    }
}

/// Central-difference gradient of `f` at `point`.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut p = point.to_vec();
    let mut g = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = p[i];
        p[i] = orig + h;
        let fp = f(&p);
        p[i] = orig - h;
        let fm = f(&p);
        p[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "function value around coordinate {i} (f+ = {fp}, f- = {fm})"
            )));
        }
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(Leaf, Tensor)]) -> Bindings {
        pairs.iter().cloned().collect()
    }

    #[test]
    fn square_and_derivative() {
        let mut t = Tape::new();
        let x = t.input("x");
        let xv = t.leaf_var(x);
        t.mul(xv, xv);
        let b = bind(&[(x, Tensor::scalar(3.0))]);
        assert_eq!(t.forward(&b).unwrap(), 9.0);
        assert_eq!(t.backward(&b, &[x]).unwrap()[&x].data(), &[6.0]);
    }

    #[test]
    fn exp_of_zero_is_one() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        t.exp(z);
        assert_eq!(t.forward(&Bindings::new()).unwrap(), 1.0);
    }

    #[test]
    fn elu_negative_one() {
        let mut t = Tape::new();
        let x = t.input("x");
        let xv = t.leaf_var(x);
        t.elu(xv);
        let v = t.forward(&bind(&[(x, Tensor::scalar(-1.0))])).unwrap();
        // standalone evaluation of the ELU branch for x <= 0
        let expected = (-1.0_f64).exp() - 1.0;
        assert!((v - expected).abs() < 1e-15);
        assert!((v + 0.63212).abs() < 1e-5);
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.param("x");
        let y = t.param("y");
        let (xv, yv) = (t.leaf_var(x), t.leaf_var(y));
        t.mul(xv, yv);
        let b = bind(&[(x, Tensor::scalar(2.0)), (y, Tensor::scalar(5.0))]);
        let g = t.backward(&b, &[x, y]).unwrap();
        assert_eq!(g[&x].data(), &[5.0]);
        assert_eq!(g[&y].data(), &[2.0]);
    }

    #[test]
    fn untouched_leaf_absent() {
        let mut t = Tape::new();
        let x = t.input("x");
        let y = t.input("y");
        let xv = t.leaf_var(x);
        t.exp(xv);
        let b = bind(&[(x, Tensor::scalar(0.5)), (y, Tensor::scalar(1.0))]);
        let g = t.backward(&b, &[x, y]).unwrap();
        assert!(g.contains_key(&x));
        assert!(!g.contains_key(&y));
    }

    #[test]
    fn log_domain_error() {
        let mut t = Tape::new();
        let x = t.input("x");
        let xv = t.leaf_var(x);
        t.log(xv);
        let err = t.forward(&bind(&[(x, Tensor::scalar(0.0))])).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut t = Tape::new();
        let a = t.input("a");
        let b = t.input("b");
        let (av, bv) = (t.leaf_var(a), t.leaf_var(b));
        let s = t.add(av, bv);
        t.sum(s);
        let bnd = bind(&[
            (a, Tensor::vector(vec![1.0, 2.0])),
            (b, Tensor::vector(vec![1.0, 2.0, 3.0])),
        ]);
        assert!(matches!(t.forward(&bnd), Err(Error::Shape { .. })));
    }

    #[test]
    fn unbound_leaf_is_error() {
        let mut t = Tape::new();
        let x = t.input("x");
        t.leaf_var(x);
        assert!(t.forward(&Bindings::new()).is_err());
    }

    #[test]
    fn non_scalar_output_is_error() {
        let mut t = Tape::new();
        let x = t.input("x");
        t.leaf_var(x);
        let b = bind(&[(x, Tensor::vector(vec![1.0, 2.0]))]);
        assert!(matches!(t.forward(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn fd_basic() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|x| x.iter().sum(), &[0.3, -2.0, 7.0], 1e-5).unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fd_reports_offending_coordinate() {
        let err = finite_diff_grad(
            |x| if x[1] > 0.0 { f64::NAN } else { 0.0 },
            &[0.0, 0.0],
            1e-3,
        )
        .unwrap_err();
        match err {
            Error::NonFinite(msg) => assert!(msg.contains("coordinate 1")),
            e => panic!("unexpected {e:?}"),
        }
        assert!(finite_diff_grad(|x| x[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut t = Tape::new();
        let x = t.input("x");
        let w = t.param("w");
        let (xv, wv) = (t.leaf_var(x), t.leaf_var(w));
        let z = t.matmul(xv, wv);
        let a = t.elu(z);
        t.softmax_cross_entropy(a, 1);
        let b = bind(&[
            (x, Tensor::vector(vec![0.3, -0.7])),
            (
                w,
                Tensor::matrix(2, 3, vec![0.1, -0.2, 0.5, 0.9, 0.3, -1.1]).unwrap(),
            ),
        ]);
        let v1 = t.forward(&b).unwrap();
        let v2 = t.forward(&b).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
    }
}
