//! Minimal reverse-mode differentiation over complex vectors and real scalars.
//!
//! Every node holds its forward value. Gradients follow the convention
//! `g = ∂L/∂Re + i·∂L/∂Im`, so a complex-linear map `M` pulls a gradient back
//! through `M^H`. The tape records a fixed sequence of operations with no
//! data-dependent branching apart from [`Tape::safe_div`], which returns zero
//! (and a zero gradient) on a zero denominator.

use std::fmt;
use std::sync::Arc;

use crate::encoding::{apply_mask, EncodingOperator};
use crate::error::{invalid, Error, Result};
use crate::image::{dot_re, norm1, norm2, C64};
use crate::sampling::SamplingMask;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
pub enum Value {
    Scalar(f64),
    Vector(Vec<C64>),
}

/// A differentiable node implemented outside the tape.
pub trait CustomOp: Send + Sync {
    /// Returns the gradient with respect to the single vector input and adds
    /// any parameter gradients into `param_grad`.
    fn backward(&self, grad_out: &Value, param_grad: &mut [f64]) -> Vec<C64>;
}

enum Op {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    /// Scalar node times vector node.
    ScaleBy(Var, Var),
    /// `y + sign·alpha·x`.
    Axpy { y: Var, alpha: Var, x: Var, sign: f64 },
    Dot(Var, Var),
    Norm2(Var),
    Norm1(Var),
    ScalarAdd(Var, Var),
    ScalarMul(Var, Var),
    Div(Var, Var),
    SafeDiv(Var, Var),
    Softplus(Var),
    Encode(Var, Arc<EncodingOperator>),
    Adjoint(Var, Arc<EncodingOperator>),
    /// `E^H E p + mu·p`.
    NormalShift { p: Var, mu: Var, op: Arc<EncodingOperator> },
    Mask(Var, Arc<SamplingMask>),
    /// Zeroes image entries outside the coil support of the operator.
    Restrict(Var, Arc<EncodingOperator>),
    /// Rounds to single precision on the forward pass, identity on the backward pass.
    RoundF32(Var),
    Custom(Var, Box<dyn CustomOp>),
}

fn restrict_to_support(op: &EncodingOperator, x: &mut [C64]) {
    for (v, &inside) in x.iter_mut().zip(&op.coils().support().data) {
        if !inside {
            *v = C64::new(0.0, 0.0);
        }
    }
}

struct Node {
    value: Value,
    op: Op,
}

/// Operation log plus forward values.
pub struct Tape {
    nodes: Vec<Node>,
    n_params: usize,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("n_params", &self.n_params)
            .finish()
    }
}

fn scalar_of(v: &Value) -> f64 {
    match v {
        Value::Scalar(s) => *s,
        Value::Vector(_) => panic!("expected a scalar node"),
    }
}

fn vec_of(v: &Value) -> &[C64] {
    match v {
        Value::Vector(x) => x,
        Value::Scalar(_) => panic!("expected a vector node"),
    }
}

/// `ln(1 + e^x)`, floored at the smallest positive normal so it stays
/// strictly positive where `e^x` underflows.
pub(crate) fn softplus(x: f64) -> f64 {
    let s = if x > 30.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    s.max(f64::MIN_POSITIVE)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// Empty tape whose parameter gradient has `n_params` entries.
    pub fn new(n_params: usize) -> Self {
        Self {
            nodes: Vec::new(),
            n_params,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    fn push(&mut self, value: Value, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    pub fn vector(&self, v: Var) -> &[C64] {
        vec_of(&self.nodes[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        scalar_of(&self.nodes[v.0].value)
    }

    pub fn constant_vec(&mut self, v: Vec<C64>) -> Var {
        self.push(Value::Vector(v), Op::Leaf)
    }

    pub fn constant(&mut self, s: f64) -> Var {
        self.push(Value::Scalar(s), Op::Leaf)
    }

    /// Scalar leaf whose gradient lands in `param_grad[index]`.
    pub fn param(&mut self, index: usize, value: f64) -> Var {
        assert!(index < self.n_params, "parameter index out of range");
        self.push(Value::Scalar(value), Op::Param(index))
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.vector(a).iter().zip(self.vector(b)).map(|(x, y)| x + y).collect();
        self.push(Value::Vector(out), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.vector(a).iter().zip(self.vector(b)).map(|(x, y)| x - y).collect();
        self.push(Value::Vector(out), Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.vector(a).iter().map(|x| x * c).collect();
        self.push(Value::Vector(out), Op::Scale(a, c))
    }

    pub fn scale_by(&mut self, s: Var, v: Var) -> Var {
        let k = self.scalar(s);
        let out = self.vector(v).iter().map(|x| x * k).collect();
        self.push(Value::Vector(out), Op::ScaleBy(s, v))
    }

    /// `y + sign·alpha·x`.
    pub fn axpy(&mut self, y: Var, alpha: Var, x: Var, sign: f64) -> Var {
        let a = sign * self.scalar(alpha);
        let out = self.vector(y).iter().zip(self.vector(x)).map(|(yi, xi)| yi + xi * a).collect();
        self.push(Value::Vector(out), Op::Axpy { y, alpha, x, sign })
    }

    /// `Re⟨a, b⟩`.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let s = dot_re(self.vector(a), self.vector(b));
        self.push(Value::Scalar(s), Op::Dot(a, b))
    }

    pub fn norm2(&mut self, a: Var) -> Var {
        let s = norm2(self.vector(a));
        self.push(Value::Scalar(s), Op::Norm2(a))
    }

    pub fn norm1(&mut self, a: Var) -> Var {
        let s = norm1(self.vector(a));
        self.push(Value::Scalar(s), Op::Norm1(a))
    }

    pub fn scalar_add(&mut self, a: Var, b: Var) -> Var {
        let s = self.scalar(a) + self.scalar(b);
        self.push(Value::Scalar(s), Op::ScalarAdd(a, b))
    }

    pub fn scalar_mul(&mut self, a: Var, b: Var) -> Var {
        let s = self.scalar(a) * self.scalar(b);
        self.push(Value::Scalar(s), Op::ScalarMul(a, b))
    }

    /// `a / b`; errors on a zero denominator.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.scalar(b);
        if d == 0.0 {
            return invalid("division by a zero normalizer");
        }
        let s = self.scalar(a) / d;
        Ok(self.push(Value::Scalar(s), Op::Div(a, b)))
    }

    /// `a / b`, or 0 when `b == 0`.
    pub fn safe_div(&mut self, a: Var, b: Var) -> Var {
        let d = self.scalar(b);
        let s = if d == 0.0 { 0.0 } else { self.scalar(a) / d };
        self.push(Value::Scalar(s), Op::SafeDiv(a, b))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let s = softplus(self.scalar(a));
        self.push(Value::Scalar(s), Op::Softplus(a))
    }

    /// Mean of scalar nodes (`terms` must be non-empty).
    pub fn mean(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty());
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.scalar_add(acc, t);
        }
        let inv = self.constant(1.0 / terms.len() as f64);
        self.scalar_mul(acc, inv)
    }

    pub fn encode(&mut self, x: Var, op: &Arc<EncodingOperator>) -> Var {
        let out = op.forward_vec(self.vector(x));
        self.push(Value::Vector(out), Op::Encode(x, op.clone()))
    }

    pub fn adjoint(&mut self, y: Var, op: &Arc<EncodingOperator>) -> Var {
        let out = op.adjoint_vec(self.vector(y));
        self.push(Value::Vector(out), Op::Adjoint(y, op.clone()))
    }

    pub fn normal_shift(&mut self, p: Var, mu: Var, op: &Arc<EncodingOperator>) -> Var {
        let m = self.scalar(mu);
        let mut out = op.normal_vec(self.vector(p));
        for (o, pi) in out.iter_mut().zip(self.vector(p)) {
            *o += pi * m;
        }
        self.push(
            Value::Vector(out),
            Op::NormalShift {
                p,
                mu,
                op: op.clone(),
            },
        )
    }

    pub fn mask(&mut self, y: Var, mask: &Arc<SamplingMask>) -> Var {
        let mut out = self.vector(y).to_vec();
        apply_mask(mask, &mut out);
        self.push(Value::Vector(out), Op::Mask(y, mask.clone()))
    }

    /// Projection onto images supported where the coils are sensitive.
    pub fn restrict(&mut self, x: Var, op: &Arc<EncodingOperator>) -> Var {
        let mut out = self.vector(x).to_vec();
        restrict_to_support(op, &mut out);
        self.push(Value::Vector(out), Op::Restrict(x, op.clone()))
    }

    pub fn round_f32(&mut self, x: Var) -> Var {
        let out = self
            .vector(x)
            .iter()
            .map(|v| C64::new(v.re as f32 as f64, v.im as f32 as f64))
            .collect();
        self.push(Value::Vector(out), Op::RoundF32(x))
    }

    /// Records an externally computed node `value = f(input)`.
    pub fn custom(&mut self, input: Var, value: Value, f: Box<dyn CustomOp>) -> Var {
        self.push(value, Op::Custom(input, f))
    }

    /// Gradients of the scalar `root` with respect to every node and every parameter.
    pub fn gradients(&self, root: Var) -> Result<Gradients> {
        self.run_backward(root, true)
    }

    /// Parameter gradient of the scalar `root`. Node gradients are dropped as
    /// soon as they are consumed.
    pub fn backward(&self, root: Var) -> Result<Vec<f64>> {
        Ok(self.run_backward(root, false)?.params)
    }

    fn run_backward(&self, root: Var, keep: bool) -> Result<Gradients> {
        if !matches!(self.nodes[root.0].value, Value::Scalar(_)) {
            return invalid("backward pass needs a scalar root");
        }
        let mut grads: Vec<Option<Value>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = vec![0.0; self.n_params];
        grads[root.0] = Some(Value::Scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, &mut params);
            if keep {
                grads[i] = Some(g);
            }
        }
        if let Some(k) = params.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {k} is not finite")));
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, i: usize, g: &Value, grads: &mut [Option<Value>], params: &mut [f64]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(k) => params[*k] += scalar_of(g),
            Op::Add(a, b) => {
                acc_vec(grads, *a, vec_of(g), 1.0);
                acc_vec(grads, *b, vec_of(g), 1.0);
            }
            Op::Sub(a, b) => {
                acc_vec(grads, *a, vec_of(g), 1.0);
                acc_vec(grads, *b, vec_of(g), -1.0);
            }
            Op::Scale(a, c) => acc_vec(grads, *a, vec_of(g), *c),
            Op::ScaleBy(s, v) => {
                let gv = vec_of(g);
                acc_scalar(grads, *s, dot_re(self.vector(*v), gv));
                acc_vec(grads, *v, gv, self.scalar(*s));
            }
            Op::Axpy { y, alpha, x, sign } => {
                let gv = vec_of(g);
                acc_vec(grads, *y, gv, 1.0);
                acc_vec(grads, *x, gv, sign * self.scalar(*alpha));
                acc_scalar(grads, *alpha, sign * dot_re(self.vector(*x), gv));
            }
            Op::Dot(a, b) => {
                let s = scalar_of(g);
                acc_vec(grads, *a, self.vector(*b), s);
                acc_vec(grads, *b, self.vector(*a), s);
            }
            Op::Norm2(a) => {
                let n = scalar_of(&self.nodes[i].value);
                if n > 0.0 {
                    acc_vec(grads, *a, self.vector(*a), scalar_of(g) / n);
                }
            }
            Op::Norm1(a) => {
                let s = scalar_of(g);
                let d: Vec<C64> = self
                    .vector(*a)
                    .iter()
                    .map(|v| {
                        let m = v.norm();
                        if m > 0.0 {
                            v * (s / m)
                        } else {
                            C64::new(0.0, 0.0)
                        }
                    })
                    .collect();
                acc_vec(grads, *a, &d, 1.0);
            }
            Op::ScalarAdd(a, b) => {
                acc_scalar(grads, *a, scalar_of(g));
                acc_scalar(grads, *b, scalar_of(g));
            }
            Op::ScalarMul(a, b) => {
                let s = scalar_of(g);
                acc_scalar(grads, *a, s * self.scalar(*b));
                acc_scalar(grads, *b, s * self.scalar(*a));
            }
            Op::Div(a, b) => {
                let s = scalar_of(g);
                let d = self.scalar(*b);
                acc_scalar(grads, *a, s / d);
                acc_scalar(grads, *b, -s * self.scalar(*a) / (d * d));
            }
            Op::SafeDiv(a, b) => {
                let d = self.scalar(*b);
                if d != 0.0 {
                    let s = scalar_of(g);
                    acc_scalar(grads, *a, s / d);
                    acc_scalar(grads, *b, -s * self.scalar(*a) / (d * d));
                }
            }
            Op::Softplus(a) => acc_scalar(grads, *a, scalar_of(g) * sigmoid(self.scalar(*a))),
            Op::Encode(x, op) => acc_owned(grads, *x, op.adjoint_vec(vec_of(g))),
            Op::Adjoint(y, op) => acc_owned(grads, *y, op.forward_vec(vec_of(g))),
            Op::NormalShift { p, mu, op } => {
                let gv = vec_of(g);
                let m = self.scalar(*mu);
                let mut gp = op.normal_vec(gv);
                for (o, gi) in gp.iter_mut().zip(gv) {
                    *o += gi * m;
                }
                acc_owned(grads, *p, gp);
                acc_scalar(grads, *mu, dot_re(self.vector(*p), gv));
            }
            Op::Mask(y, mask) => {
                let mut gy = vec_of(g).to_vec();
                apply_mask(mask, &mut gy);
                acc_owned(grads, *y, gy);
            }
            Op::Restrict(x, op) => {
                let mut gx = vec_of(g).to_vec();
                restrict_to_support(op, &mut gx);
                acc_owned(grads, *x, gx);
            }
            Op::RoundF32(x) => acc_vec(grads, *x, vec_of(g), 1.0),
            Op::Custom(x, f) => {
                let gx = f.backward(g, params);
                acc_owned(grads, *x, gx);
            }
        }
    }
}

/// Result of [`Tape::gradients`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Value>>,
    pub params: Vec<f64>,
}

impl Gradients {
    /// Gradient with respect to a vector node (zeros if unreached).
    pub fn vector(&self, v: Var, len: usize) -> Vec<C64> {
        match &self.nodes[v.0] {
            Some(Value::Vector(g)) => g.clone(),
            _ => vec![C64::new(0.0, 0.0); len],
        }
    }

    /// Gradient with respect to a scalar node (zero if unreached).
    pub fn scalar(&self, v: Var) -> f64 {
        match &self.nodes[v.0] {
            Some(Value::Scalar(g)) => *g,
            _ => 0.0,
        }
    }
}

fn acc_scalar(grads: &mut [Option<Value>], v: Var, s: f64) {
    match &mut grads[v.0] {
        Some(Value::Scalar(g)) => *g += s,
        slot @ None => *slot = Some(Value::Scalar(s)),
        Some(Value::Vector(_)) => panic!("scalar gradient into a vector node"),
    }
}

fn acc_vec(grads: &mut [Option<Value>], v: Var, d: &[C64], c: f64) {
    match &mut grads[v.0] {
        Some(Value::Vector(g)) => {
            for (gi, di) in g.iter_mut().zip(d) {
                *gi += di * c;
            }
        }
        slot @ None => *slot = Some(Value::Vector(d.iter().map(|x| x * c).collect())),
        Some(Value::Scalar(_)) => panic!("vector gradient into a scalar node"),
    }
}

fn acc_owned(grads: &mut [Option<Value>], v: Var, d: Vec<C64>) {
    match &mut grads[v.0] {
        Some(Value::Vector(g)) => {
            for (gi, di) in g.iter_mut().zip(&d) {
                *gi += di;
            }
        }
        slot @ None => *slot = Some(Value::Vector(d)),
        Some(Value::Scalar(_)) => panic!("vector gradient into a scalar node"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::simulate_coils;
    use crate::image::BoolImage;
    use crate::sampling::equidistant_mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<C64> {
        (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    }

    fn small_op() -> Arc<EncodingOperator> {
        let s = simulate_coils(8, 8, 2, &BoolImage::filled(8, 8, true)).unwrap();
        Arc::new(EncodingOperator::new(Arc::new(s), equidistant_mask(8, 8, 2, 2).unwrap()).unwrap())
    }

    /// A scalar function of one input vector built from every op kind.
    fn build(tape: &mut Tape, x: Var, op: &Arc<EncodingOperator>, w: &[C64]) -> Var {
        let mu_raw = tape.param(0, 0.3);
        let mu = tape.softplus(mu_raw);
        let k = tape.encode(x, op);
        let mask = Arc::new(op.mask().clone());
        let km = tape.mask(k, &mask);
        let back = tape.adjoint(km, op);
        let n = tape.normal_shift(back, mu, op);
        let wv = tape.constant_vec(w.to_vec());
        let d = tape.dot(n, wv);
        let s = tape.scale_by(d, x);
        let t = tape.axpy(s, mu, back, -1.0);
        let u = tape.sub(t, wv);
        let v = tape.scale(u, 0.7);
        let v = tape.add(v, x);
        let n2 = tape.norm2(v);
        let n1 = tape.norm1(v);
        let q = tape.div(n2, n1).unwrap();
        let r = tape.safe_div(q, mu);
        let zero = tape.constant(0.0);
        let z = tape.safe_div(r, zero);
        let m = tape.scalar_mul(r, n2);
        let sum = tape.scalar_add(m, z);
        tape.mean(&[sum, q])
    }

    #[test]
    fn gradients_match_finite_differences() {
        let op = small_op();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_vec(64, &mut rng);
        let w = rand_vec(64, &mut rng);
        let eval = |x: &[C64]| {
            let mut tape = Tape::new(1);
            let xv = tape.constant_vec(x.to_vec());
            let out = build(&mut tape, xv, &op, &w);
            tape.scalar(out)
        };
        let mut tape = Tape::new(1);
        let xv = tape.constant_vec(x0.clone());
        let out = build(&mut tape, xv, &op, &w);
        let grads = tape.gradients(out).unwrap();
        let gx = grads.vector(xv, 64);
        let h = 1e-6;
        for k in [0, 9, 33, 63] {
            for (unit, comp) in [(C64::new(1.0, 0.0), gx[k].re), (C64::new(0.0, 1.0), gx[k].im)] {
                let mut xp = x0.clone();
                let mut xm = x0.clone();
                xp[k] += unit * h;
                xm[k] -= unit * h;
                let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
                assert!((fd - comp).abs() < 1e-6 * (1.0 + fd.abs()), "x[{k}]: {fd} vs {comp}");
            }
        }
        // Parameter gradient through softplus: perturb the value of the param leaf.
        let f = |shift: f64| {
            let mut tape = Tape::new(1);
            let xv = tape.constant_vec(x0.clone());
            let mu_raw = tape.param(0, 0.3 + shift);
            let mu = tape.softplus(mu_raw);
            let k = tape.encode(xv, &op);
            let back = tape.adjoint(k, &op);
            let n = tape.normal_shift(back, mu, &op);
            let d = tape.norm2(n);
            (tape.scalar(d), tape.backward(d).unwrap()[0])
        };
        let (_, g) = f(0.0);
        let fd = (f(h).0 - f(-h).0) / (2.0 * h);
        assert!((fd - g).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {g}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new(0);
        let x = tape.constant_vec(vec![C64::new(1.0, 2.0); 4]);
        let d = tape.detach(x);
        let n = tape.norm2(d);
        let g = tape.gradients(n).unwrap();
        assert!(g.vector(x, 4).iter().all(|v| *v == C64::new(0.0, 0.0)));
    }

    #[test]
    fn division_by_zero_is_rejected() {
        let mut tape = Tape::new(0);
        let a = tape.constant(1.0);
        let b = tape.constant(0.0);
        assert!(tape.div(a, b).is_err());
        let c = tape.safe_div(a, b);
        assert_eq!(tape.scalar(c), 0.0);
    }

    #[test]
    fn softplus_is_positive_and_stable() {
        for x in [-800.0, -30.0, 0.0, 30.0, 800.0] {
            let s = softplus(x);
            assert!(s > 0.0 && s.is_finite(), "{x}: {s}");
        }
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
