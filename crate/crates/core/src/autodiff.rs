//! Reverse-mode automatic differentiation on a scalar tape.
//!
//! A [`Trace`] is an append-only list of nodes. Every node stores its
//! operation tag, the ids of the earlier nodes it consumed, and the local
//! partial derivative with respect to each of them, so the backward pass is
//! a single reverse sweep that never re-evaluates anything.
//!
//! ```
//! use uavgnn::autodiff::Trace;
//!
//! let trace = Trace::new();
//! let x = trace.leaf(3.0);
//! let y = trace.leaf(2.0);
//! let f = x * y;
//! let grads = trace.backward(f).unwrap();
//! assert_eq!(grads.wrt(x), 2.0);
//! assert_eq!(grads.wrt(y), 3.0);
//! ```
//!
//! Values that are not on any trace (built with [`Scalar::cst`]) act as
//! constants and never allocate nodes.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::scalar::{Scalar, sigmoid_f64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("logarithm of non-positive value {0}")]
    LogDomain(f64),
    #[error("log2(1+x) with x = {0} <= -1")]
    Log1pDomain(f64),
    #[error("division by zero (numerator {0})")]
    DivByZero(f64),
    #[error("root does not belong to this trace")]
    ForeignRoot,
}

/// Operation tag of a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddConst,
    MulConst,
    PowConst,
    Exp,
    Ln,
    Max0,
    Sigmoid,
    Tanh,
    Log2OnePlus,
    Dot,
    Sum,
}

#[derive(Default)]
struct Tape {
    ops: Vec<Op>,
    values: Vec<f64>,
    // node i owns args[arg_start[i]..arg_start[i + 1]]
    arg_start: Vec<u32>,
    args: Vec<u32>,
    partials: Vec<f64>,
    fault: Option<AutodiffError>,
}

impl Tape {
    fn push(&mut self, op: Op, value: f64, operands: &[(u32, f64)]) -> u32 {
        let id = self.ops.len() as u32;
        self.ops.push(op);
        self.values.push(value);
        self.arg_start.push(self.args.len() as u32);
        for &(a, d) in operands {
            debug_assert!(a < id);
            self.args.push(a);
            self.partials.push(d);
        }
        id
    }

    fn range(&self, id: usize) -> std::ops::Range<usize> {
        let start = self.arg_start[id] as usize;
        let end = self.arg_start.get(id + 1).map_or(self.args.len(), |&e| e as usize);
        start..end
    }
}

static NEXT_TRACE_ID: AtomicU64 = AtomicU64::new(1);

/// Recording of one scalar computation.
pub struct Trace {
    id: u64,
    tape: RefCell<Tape>,
}

impl Default for Trace {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Trace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trace")
            .field("id", &self.id)
            .field("nodes", &self.len())
            .finish()
    }
}

impl Trace {
    pub fn new() -> Self {
        Self {
            id: NEXT_TRACE_ID.fetch_add(1, Ordering::Relaxed),
            tape: RefCell::new(Tape::default()),
        }
    }

    pub fn with_capacity(nodes: usize, args: usize) -> Self {
        let t = Self::new();
        {
            let mut tape = t.tape.borrow_mut();
            tape.ops.reserve(nodes);
            tape.values.reserve(nodes);
            tape.arg_start.reserve(nodes);
            tape.args.reserve(args);
            tape.partials.reserve(args);
        }
        t
    }

    /// Independent variable.
    pub fn leaf(&self, value: f64) -> Var<'_> {
        let id = self.tape.borrow_mut().push(Op::Leaf, value, &[]);
        Var {
            trace: Some(self),
            id,
            value,
        }
    }

    pub fn leaves(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tag, operand ids and primal value of node `id`.
    pub fn node(&self, id: u32) -> (Op, Vec<u32>, f64) {
        let tape = self.tape.borrow();
        let r = tape.range(id as usize);
        (tape.ops[id as usize], tape.args[r].to_vec(), tape.values[id as usize])
    }

    /// First domain violation recorded by an infallible operator, if any.
    pub fn fault(&self) -> Option<AutodiffError> {
        self.tape.borrow().fault.clone()
    }

    fn record_fault(&self, e: AutodiffError) {
        let mut tape = self.tape.borrow_mut();
        if tape.fault.is_none() {
            tape.fault = Some(e);
        }
    }

    fn owns(&self, v: &Var<'_>) -> bool {
        v.trace.is_some_and(|t| t.id == self.id)
    }

    /// Gradient of `root` with respect to every node of the trace.
    ///
    /// The trace itself is not modified, so repeated calls return identical
    /// results.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, AutodiffError> {
        if let Some(e) = self.fault() {
            return Err(e);
        }
        if !self.owns(&root) {
            return Err(AutodiffError::ForeignRoot);
        }
        let tape = self.tape.borrow();
        let n = tape.ops.len();
        let mut adj = vec![0.0; n];
        adj[root.id as usize] = 1.0;
        for i in (0..=root.id as usize).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            for k in tape.range(i) {
                adj[tape.args[k] as usize] += g * tape.partials[k];
            }
        }
        Ok(Gradients { trace_id: self.id, adj })
    }
}

/// Adjoints produced by [`Trace::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    trace_id: u64,
    adj: Vec<f64>,
}

impl Gradients {
    /// Derivative of the root with respect to `v`; zero for constants and
    /// for variables of another trace.
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        match v.trace {
            Some(t) if t.id == self.trace_id => self.adj[v.id as usize],
            _ => 0.0,
        }
    }

    pub fn wrt_all(&self, vs: &[Var<'_>]) -> Vec<f64> {
        vs.iter().map(|&v| self.wrt(v)).collect()
    }
}

/// A scalar that is either a node of a [`Trace`] or a free constant.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    trace: Option<&'t Trace>,
    id: u32,
    value: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.trace {
            Some(_) => write!(f, "Var(#{} = {})", self.id, self.value),
            None => write!(f, "Const({})", self.value),
        }
    }
}

fn pick<'t>(a: Option<&'t Trace>, b: Option<&'t Trace>) -> Option<&'t Trace> {
    match (a, b) {
        (Some(x), Some(y)) => {
            assert!(std::ptr::eq(x, y), "operands recorded on different traces");
            Some(x)
        }
        (x, None) => x,
        (None, y) => y,
    }
}

impl<'t> Var<'t> {
    pub fn constant(value: f64) -> Self {
        Var {
            trace: None,
            id: 0,
            value,
        }
    }

    pub fn val(self) -> f64 {
        self.value
    }

    pub fn id(self) -> Option<u32> {
        self.trace.map(|_| self.id)
    }

    pub fn is_constant(self) -> bool {
        self.trace.is_none()
    }

    fn unary(self, op: Op, value: f64, d: f64) -> Self {
        match self.trace {
            None => Var::constant(value),
            Some(t) => {
                let id = t.tape.borrow_mut().push(op, value, &[(self.id, d)]);
                Var {
                    trace: Some(t),
                    id,
                    value,
                }
            }
        }
    }

    fn binary(self, rhs: Self, op: Op, value: f64, da: f64, db: f64) -> Self {
        let Some(t) = pick(self.trace, rhs.trace) else {
            return Var::constant(value);
        };
        let mut operands = [(0, 0.0); 2];
        let mut n = 0;
        if self.trace.is_some() {
            operands[n] = (self.id, da);
            n += 1;
        }
        if rhs.trace.is_some() {
            operands[n] = (rhs.id, db);
            n += 1;
        }
        let id = t.tape.borrow_mut().push(op, value, &operands[..n]);
        Var {
            trace: Some(t),
            id,
            value,
        }
    }

    /// Natural log that fails immediately on a non-positive operand.
    pub fn checked_ln(self) -> Result<Self, AutodiffError> {
        if self.value > 0.0 {
            Ok(self.unary(Op::Ln, self.value.ln(), 1.0 / self.value))
        } else {
            Err(AutodiffError::LogDomain(self.value))
        }
    }

    /// Division that fails immediately on a zero denominator.
    pub fn checked_div(self, rhs: Self) -> Result<Self, AutodiffError> {
        if rhs.value == 0.0 {
            return Err(AutodiffError::DivByZero(self.value));
        }
        let inv = 1.0 / rhs.value;
        Ok(self.binary(rhs, Op::Div, self.value / rhs.value, inv, -self.value * inv * inv))
    }

    pub fn checked_log2_1p(self) -> Result<Self, AutodiffError> {
        if self.value > -1.0 {
            Ok(self.unary(
                Op::Log2OnePlus,
                self.value.ln_1p() / std::f64::consts::LN_2,
                1.0 / ((1.0 + self.value) * std::f64::consts::LN_2),
            ))
        } else {
            Err(AutodiffError::Log1pDomain(self.value))
        }
    }

    fn fault(self, e: AutodiffError) {
        if let Some(t) = self.trace {
            t.record_fault(e);
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Add, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Sub, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, Op::Mul, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        match self.checked_div(rhs) {
            Ok(v) => v,
            Err(e) => {
                self.fault(e.clone());
                rhs.fault(e);
                Var {
                    value: f64::NAN,
                    ..self
                }
            }
        }
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(Op::Neg, -self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, c: f64) -> Self {
        self.unary(Op::AddConst, self.value + c, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, c: f64) -> Self {
        self.unary(Op::AddConst, self.value - c, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, c: f64) -> Self {
        self.unary(Op::MulConst, self.value * c, c)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    fn div(self, c: f64) -> Self {
        if c == 0.0 {
            self.fault(AutodiffError::DivByZero(self.value));
        }
        self.unary(Op::MulConst, self.value / c, 1.0 / c)
    }
}

impl<'t> Scalar for Var<'t> {
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }

    fn value(self) -> f64 {
        self.value
    }

    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(Op::Exp, e, e)
    }

    fn ln(self) -> Self {
        match self.checked_ln() {
            Ok(v) => v,
            Err(e) => {
                self.fault(e);
                self.unary(Op::Ln, f64::NAN, f64::NAN)
            }
        }
    }

    fn powf(self, exponent: f64) -> Self {
        let v = self.value.powf(exponent);
        self.unary(Op::PowConst, v, exponent * self.value.powf(exponent - 1.0))
    }

    fn max0(self) -> Self {
        if self.value > 0.0 {
            self.unary(Op::Max0, self.value, 1.0)
        } else {
            self.unary(Op::Max0, 0.0, 0.0)
        }
    }

    fn sigmoid(self) -> Self {
        let s = sigmoid_f64(self.value);
        self.unary(Op::Sigmoid, s, s * (1.0 - s))
    }

    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(Op::Tanh, t, 1.0 - t * t)
    }

    fn log2_1p(self) -> Self {
        match self.checked_log2_1p() {
            Ok(v) => v,
            Err(e) => {
                self.fault(e);
                self.unary(Op::Log2OnePlus, f64::NAN, f64::NAN)
            }
        }
    }

    /// Fused `bias + Σ w·x`: one tape node regardless of length.
    fn dot(w: &[Self], x: &[Self], bias: Self) -> Self {
        assert_eq!(w.len(), x.len());
        let mut value = bias.value;
        let mut trace = bias.trace;
        for (a, b) in w.iter().zip(x) {
            value += a.value * b.value;
            trace = pick(trace, a.trace);
            trace = pick(trace, b.trace);
        }
        let Some(t) = trace else {
            return Var::constant(value);
        };
        let mut tape = t.tape.borrow_mut();
        let tape = &mut *tape;
        let id = tape.ops.len() as u32;
        tape.ops.push(Op::Dot);
        tape.values.push(value);
        tape.arg_start.push(tape.args.len() as u32);
        for (a, b) in w.iter().zip(x) {
            if a.trace.is_some() {
                tape.args.push(a.id);
                tape.partials.push(b.value);
            }
            if b.trace.is_some() {
                tape.args.push(b.id);
                tape.partials.push(a.value);
            }
        }
        if bias.trace.is_some() {
            tape.args.push(bias.id);
            tape.partials.push(1.0);
        }
        Var {
            trace: Some(t),
            id,
            value,
        }
    }

    /// Fused n-ary sum: one tape node.
    fn sum(xs: &[Self]) -> Self {
        let mut value = 0.0;
        let mut trace = None;
        for x in xs {
            value += x.value;
            trace = pick(trace, x.trace);
        }
        let Some(t) = trace else {
            return Var::constant(value);
        };
        let operands: Vec<(u32, f64)> = xs.iter().filter(|x| x.trace.is_some()).map(|x| (x.id, 1.0)).collect();
        let id = t.tape.borrow_mut().push(Op::Sum, value, &operands);
        Var {
            trace: Some(t),
            id,
            value,
        }
    }
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Largest relative error over the coordinates that were compared.
    pub max_rel_err: f64,
    /// Coordinate attaining `max_rel_err`.
    pub worst: Option<usize>,
    /// Coordinates compared.
    pub checked: Vec<usize>,
    /// Coordinates skipped because a kink of `max0` lies within the step.
    pub excluded: Vec<usize>,
}

/// Relative gap between the one-sided slopes that marks a kink.
const KINK_TOL: f64 = 1e-2;

/// Largest relative disagreement between the central differences at `h`
/// and `h/2` for which the extrapolated value is trusted.
const CONSISTENCY_TOL: f64 = 3e-5;

/// Step reductions tried before a coordinate is given up on.
const STEP_RETRIES: usize = 2;

/// Gradient magnitude below which errors are measured absolutely. Central
/// differences of an O(10) loss carry round-off of 1e-11 to 1e-10 at the
/// default step, so relative errors of smaller gradients are meaningless.
pub const FD_FLOOR: f64 = 1e-5;

/// Compares `analytic[i]` with a Richardson-extrapolated central difference
/// built from steps `h` and `h/2`, for every `i` in `coords`.
///
/// `h` starts at `eps`. When the two central differences disagree (a kink
/// of `max0` lies within the step) the step is cut tenfold, up to
/// [`STEP_RETRIES`] times, before the coordinate is excluded. It is also
/// excluded when the gap between the one-sided slopes does not shrink with
/// the step, which curvature would do but a kink at the point does not.
/// Relative error is `|a − n| / max(|a|, |n|, FD_FLOOR)`.
pub fn finite_diff_check<F>(mut f: F, x: &[f64], analytic: &[f64], eps: f64, coords: &[usize]) -> FdReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len());
    let f0 = f(x);
    let mut xp = x.to_vec();
    let mut at = |i: usize, d: f64| {
        xp[i] = x[i] + d;
        let v = f(&xp);
        xp[i] = x[i];
        v
    };
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        checked: Vec::new(),
        excluded: Vec::new(),
    };
    for &i in coords {
        let mut numeric = None;
        let mut h = eps;
        for _ in 0..=STEP_RETRIES {
            let (p1, m1) = (at(i, h), at(i, -h));
            let (p2, m2) = (at(i, h / 2.0), at(i, -h / 2.0));
            let d1 = (p1 - m1) / (2.0 * h);
            let d2 = (p2 - m2) / h;
            let gap1 = ((p1 - f0) - (f0 - m1)).abs() / h;
            let gap2 = ((p2 - f0) - (f0 - m2)).abs() / (h / 2.0);
            let scale = d1.abs().max(d2.abs()).max(FD_FLOOR);
            if gap2 > KINK_TOL * scale && gap2 > 0.75 * gap1 {
                break;
            }
            if (d1 - d2).abs() <= CONSISTENCY_TOL * scale {
                numeric = Some((4.0 * d2 - d1) / 3.0);
                break;
            }
            h /= 10.0;
        }
        let Some(numeric) = numeric else {
            report.excluded.push(i);
            continue;
        };
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = err;
            report.worst = Some(i);
        }
        report.checked.push(i);
    }
    report
}
