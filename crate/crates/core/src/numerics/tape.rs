//! Reverse-mode differentiation over a linear tape.
//!
//! Values are computed eagerly as ops are recorded. `backward` walks the tape
//! in reverse and returns gradients keyed by parameter name; nodes that do not
//! depend on any parameter never receive a gradient buffer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{self, add_row_bias, Tensor};
use crate::numerics::{ParamSet, Parameter};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(String),
    Matmul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    /// Per-row `−log softmax(row)[label]`.
    CrossEntropy(Var, Vec<usize>),
    /// Per-row `−T·logsumexp(row / T)`.
    Energy(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, keyed by parameter name.
#[derive(Debug, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    /// Adds into `Parameter::grad` for every parameter that received a gradient.
    pub fn accumulate_into<M: ParamSet + ?Sized>(&self, model: &mut M) {
        for p in model.params_mut() {
            if let Some(g) = self.by_name.get(&p.name) {
                for (dst, src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records a parameter leaf. Binding the same parameter twice sums both contributions.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.push(p.value.clone(), Op::Param(p.name.clone()), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Matmul(a, b), ng))
    }

    /// `x[n×q] + b[q]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.rank() != 2 || bv.rank() != 1 || xv.shape()[1] != bv.len() {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        add_row_bias(&mut out, bv);
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    /// `x·w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(v, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), tensor::sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Per-row cross-entropy of `[n×K]` logits, shape `[n]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let mut out = Vec::with_capacity(labels.len());
        for (i, &y) in labels.iter().enumerate() {
            out.push(tensor::softmax_cross_entropy(lv.row(i), y)?);
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::vector(out),
            Op::CrossEntropy(logits, labels.to_vec()),
            ng,
        ))
    }

    /// Per-row energy `−T·logsumexp(z/T)` of `[n×K]` logits, shape `[n]`.
    pub fn energy(&mut self, logits: Var, temperature: f64) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 {
            return Err(Error::shape("energy", lv.shape(), &[0, 0]));
        }
        let out = (0..lv.rows())
            .map(|i| crate::objective::energy(lv.row(i), temperature))
            .collect();
        let ng = self.ng(logits);
        Ok(self.push(Tensor::vector(out), Op::Energy(logits, temperature), ng))
    }

    /// Gradients of the scalar `loss` with respect to every bound parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, found shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => match out.by_name.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        out.by_name.insert(name.clone(), g);
                    }
                },
                Op::Matmul(a, b) => {
                    if self.ng(*a) {
                        let da = tensor::matmul_nt(&g, self.value(*b))?;
                        self.acc(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let db = tensor::matmul_tn(self.value(*a), &g)?;
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::AddBias(x, b) => {
                    if self.ng(*b) {
                        let q = self.value(*b).len();
                        let mut db = vec![0.0; q];
                        for row in g.data().chunks(q) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.acc(&mut grads, *b, Tensor::new(vec![q], db)?);
                    }
                    if self.ng(*x) {
                        self.acc(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Relu(x) => {
                    let d = zip(&g, self.value(*x), |g, x| if x > 0.0 { g } else { 0.0 });
                    self.acc(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let d = zip(&g, &node.value, |g, y| g * y * (1.0 - y));
                    self.acc(&mut grads, *x, d);
                }
                Op::Abs(x) => {
                    // subgradient 0 at the kink
                    let d = zip(&g, self.value(*x), |g, x| g * sign(x));
                    self.acc(&mut grads, *x, d);
                }
                Op::Square(x) => {
                    let d = zip(&g, self.value(*x), |g, x| 2.0 * x * g);
                    self.acc(&mut grads, *x, d);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    self.acc(&mut grads, *x, g.map(|v| c * v));
                }
                Op::AddScalar(x) => self.acc(&mut grads, *x, g),
                Op::Sum(x) => {
                    let gs = g.data()[0];
                    self.acc(&mut grads, *x, Tensor::filled(self.value(*x).shape(), gs));
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let gs = g.data()[0] / xv.len() as f64;
                    self.acc(&mut grads, *x, Tensor::filled(xv.shape(), gs));
                }
                Op::CrossEntropy(x, labels) => {
                    let xv = self.value(*x);
                    let k = xv.cols();
                    let mut d = Vec::with_capacity(xv.len());
                    for (i, &y) in labels.iter().enumerate() {
                        let p = tensor::softmax(xv.row(i));
                        let gi = g.data()[i];
                        d.extend(
                            p.iter()
                                .enumerate()
                                .map(|(j, &pj)| gi * (pj - if j == y { 1.0 } else { 0.0 })),
                        );
                    }
                    debug_assert_eq!(d.len(), labels.len() * k);
                    self.acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                Op::Energy(x, t) => {
                    // ∂E/∂z_j = −softmax(z/T)_j
                    let xv = self.value(*x);
                    let mut d = Vec::with_capacity(xv.len());
                    for i in 0..xv.rows() {
                        let scaled: Vec<f64> = xv.row(i).iter().map(|v| v / t).collect();
                        let gi = g.data()[i];
                        d.extend(tensor::softmax(&scaled).into_iter().map(|p| -gi * p));
                    }
                    self.acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
            }
        }
        Ok(out)
    }

    /// `backward` followed by accumulation into the model's `grad` buffers.
    pub fn backward_into<M: ParamSet + ?Sized>(&self, loss: Var, model: &mut M) -> Result<()> {
        self.backward(loss)?.accumulate_into(model);
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions, RngStream};

    fn rand_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn sum_of_matmul_grad_matches_finite_differences() {
        // loss = Σ_ij (x·W)_ij with fixed x; dL/dW[k,j] = Σ_i x[i,k]
        let mut rng = RngStream::new(2);
        let x = rand_tensor(&[3, 4], &mut rng);
        let w = Parameter::new("w", rand_tensor(&[4, 2], &mut rng));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.param(&w);
        let y = tape.matmul(xv, wv).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        let gw = g.get("w").unwrap();

        let eps = 1e-6;
        let eval = |w: &Tensor| tensor::matmul(&x, w).unwrap().sum();
        for idx in 0..8 {
            let mut plus = w.value.clone();
            plus.data_mut()[idx] += eps;
            let mut minus = w.value.clone();
            minus.data_mut()[idx] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            assert!((fd - gw.data()[idx]).abs() < 1e-8);
            let col_sum: f64 = (0..3).map(|i| x.data()[i * 4 + idx / 2]).sum();
            assert!((gw.data()[idx] - col_sum).abs() < 1e-12);
        }
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut ps = vec![
            Parameter::new("used", Tensor::vector(vec![1.0, 2.0])),
            Parameter::new("unused", Tensor::vector(vec![3.0])),
        ];
        let mut tape = Tape::new();
        let u = tape.param(&ps[0]);
        let _ = tape.param(&ps[1]);
        let sq = tape.square(u);
        let loss = tape.sum(sq);
        tape.backward_into(loss, &mut ps).unwrap();
        assert_eq!(ps[0].grad.data(), &[2.0, 4.0]);
        assert_eq!(ps[1].grad.data(), &[0.0]);
    }

    #[test]
    fn backward_twice_doubles() {
        let mut ps = vec![Parameter::new("w", Tensor::vector(vec![0.5, -1.5]))];
        let mut tape = Tape::new();
        let w = tape.param(&ps[0]);
        let sq = tape.square(w);
        let loss = tape.mean(sq);
        tape.backward_into(loss, &mut ps).unwrap();
        let once = ps[0].grad.clone();
        tape.backward_into(loss, &mut ps).unwrap();
        for (a, b) in ps[0].grad.data().iter().zip(once.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let p = Parameter::new("w", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let w = tape.param(&p);
        let r = tape.relu(w);
        assert!(matches!(tape.backward(r), Err(Error::Contract(_))));
    }

    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = RngStream::new(17);
        let mut ps = vec![
            Parameter::new("w", rand_tensor(&[5, 3], &mut rng)),
            Parameter::new("b", rand_tensor(&[3], &mut rng)),
            Parameter::new("u", rand_tensor(&[4, 3], &mut rng)),
        ];
        let x = rand_tensor(&[4, 5], &mut rng);
        let labels = vec![0, 2, 1, 2];
        let report = grad_check(
            &mut ps,
            |tape, ps: &Vec<Parameter>| {
                let xv = tape.constant(x.clone());
                let w = tape.param(&ps[0]);
                let b = tape.param(&ps[1]);
                let u = tape.param(&ps[2]);
                let h = tape.affine(xv, w, b)?;
                let s = tape.sigmoid(h);
                let d = tape.sub(s, u)?;
                let a = tape.abs(d);
                let l1 = tape.sum(a);
                let r = tape.relu(h);
                let z = tape.add(r, u)?;
                let ce = tape.cross_entropy(z, &labels)?;
                let ce = tape.mean(ce);
                let e = tape.energy(z, 2.0)?;
                let e = tape.add_scalar(e, 1.0);
                let e = tape.scale(e, 0.5);
                let e = tape.square(e);
                let e = tape.mean(e);
                let t = tape.add(l1, ce)?;
                tape.add(t, e)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }
}
