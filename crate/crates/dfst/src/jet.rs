//! Order-3 multivariate Taylor jets and reverse-mode parameter gradients.
//!
//! A [`Jet3`] carries the value, gradient, Hessian and third-derivative
//! tensor of a scalar quantity with respect to up to four differentiation
//! variables (the space-time coordinates). Symmetric components are stored
//! canonically (sorted multi-indices only), so index-permutation symmetry is
//! structural rather than numerical. Arithmetic propagates truncated Taylor
//! expansions exactly: order 3 is what the losses need, because they
//! differentiate Hessian-derived fields once more.
//!
//! Everything is generic over [`Scalar`] with two implementations: plain
//! `f64` for forward evaluation, and [`Tv`] — a variable on a recording
//! [`Tape`] — for reverse-mode accumulation of parameter gradients. Running
//! the *same* jet formulas on the tape is what keeps the two differentiation
//! routes consistent.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

/// Errors from jet arithmetic and tape evaluation.
#[derive(Debug, Error)]
pub enum JetError {
    #[error("variable index {index} out of range for {nvars} variables")]
    VariableIndex { index: usize, nvars: usize },
    #[error("number of variables {0} exceeds the supported maximum of 4")]
    TooManyVariables(usize),
    #[error("division by a jet with zero value")]
    DivisionSingularity,
    #[error("non-finite value produced by `{op}` at tape node {node}")]
    NonFinite { node: usize, op: &'static str },
}

/// Maximum number of differentiation variables (t, x, y, z).
pub const MAX_VARS: usize = 4;
const MAX_H: usize = MAX_VARS * (MAX_VARS + 1) / 2;
const MAX_T3: usize = MAX_VARS * (MAX_VARS + 1) * (MAX_VARS + 2) / 6;

/// Canonical slot enumeration for symmetric derivative storage at a given
/// variable count.
#[derive(Debug)]
pub struct JetLayout {
    pub nvars: usize,
    pub n_hess: usize,
    pub n_third: usize,
    pub hess_pairs: [(u8, u8); MAX_H],
    pub third_triples: [(u8, u8, u8); MAX_T3],
    hess_slot: [[u8; MAX_VARS]; MAX_VARS],
    third_slot: [[[u8; MAX_VARS]; MAX_VARS]; MAX_VARS],
}

impl JetLayout {
    const fn build(n: usize) -> JetLayout {
        let mut layout = JetLayout {
            nvars: n,
            n_hess: n * (n + 1) / 2,
            n_third: n * (n + 1) * (n + 2) / 6,
            hess_pairs: [(0, 0); MAX_H],
            third_triples: [(0, 0, 0); MAX_T3],
            hess_slot: [[0; MAX_VARS]; MAX_VARS],
            third_slot: [[[0; MAX_VARS]; MAX_VARS]; MAX_VARS],
        };
        let mut s = 0;
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j < n {
                layout.hess_pairs[s] = (i as u8, j as u8);
                layout.hess_slot[i][j] = s as u8;
                layout.hess_slot[j][i] = s as u8;
                s += 1;
                j += 1;
            }
            i += 1;
        }
        let mut s3 = 0;
        let mut a = 0;
        while a < n {
            let mut b = a;
            while b < n {
                let mut c = b;
                while c < n {
                    layout.third_triples[s3] = (a as u8, b as u8, c as u8);
                    // All 6 permutations point at the canonical slot.
                    layout.third_slot[a][b][c] = s3 as u8;
                    layout.third_slot[a][c][b] = s3 as u8;
                    layout.third_slot[b][a][c] = s3 as u8;
                    layout.third_slot[b][c][a] = s3 as u8;
                    layout.third_slot[c][a][b] = s3 as u8;
                    layout.third_slot[c][b][a] = s3 as u8;
                    s3 += 1;
                    c += 1;
                }
                b += 1;
            }
            a += 1;
        }
        layout
    }

    #[inline]
    pub fn hess_index(&self, i: usize, j: usize) -> usize {
        self.hess_slot[i][j] as usize
    }

    #[inline]
    pub fn third_index(&self, i: usize, j: usize, k: usize) -> usize {
        self.third_slot[i][j][k] as usize
    }

    /// Total number of stored components (1 + n + hess + third).
    pub fn components(&self) -> usize {
        1 + self.nvars + self.n_hess + self.n_third
    }
}

static LAYOUTS: [JetLayout; MAX_VARS + 1] = [
    JetLayout::build(0),
    JetLayout::build(1),
    JetLayout::build(2),
    JetLayout::build(3),
    JetLayout::build(4),
];

/// Layout table for `nvars` variables. Panics above [`MAX_VARS`].
#[inline]
pub fn layout(nvars: usize) -> &'static JetLayout {
    &LAYOUTS[nvars]
}

/// Scalar number types the jet arithmetic can run on.
///
/// `lit` lifts an `f64` constant into the same context as `self` (for a tape
/// variable that means "a constant node on the same tape"); `scale` is
/// multiplication by a plain constant.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn lit(self, v: f64) -> Self;
    fn scale(self, k: f64) -> Self;
    fn value(self) -> f64;
    fn tanh_s(self) -> Self;
    fn exp_s(self) -> Self;
    fn sin_s(self) -> Self;
    fn cos_s(self) -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn lit(self, v: f64) -> Self {
        v
    }
    #[inline]
    fn scale(self, k: f64) -> Self {
        self * k
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn tanh_s(self) -> Self {
        self.tanh()
    }
    #[inline]
    fn exp_s(self) -> Self {
        self.exp()
    }
    #[inline]
    fn sin_s(self) -> Self {
        self.sin()
    }
    #[inline]
    fn cos_s(self) -> Self {
        self.cos()
    }
}

/// Truncated Taylor expansion of a scalar through order 3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet3<T> {
    nvars: u8,
    pub v: T,
    pub g: [T; MAX_VARS],
    pub h: [T; MAX_H],
    pub t: [T; MAX_T3],
}

impl<T: Scalar> Jet3<T> {
    /// A constant: all derivative components zero.
    pub fn constant_of(v: T, nvars: usize) -> Self {
        let z = v.lit(0.0);
        Jet3 { nvars: nvars as u8, v, g: [z; MAX_VARS], h: [z; MAX_H], t: [z; MAX_T3] }
    }

    /// The seed for differentiation variable `index`.
    pub fn variable_of(v: T, index: usize, nvars: usize) -> Self {
        let mut jet = Self::constant_of(v, nvars);
        jet.g[index] = v.lit(1.0);
        jet
    }

    pub fn nvars(&self) -> usize {
        self.nvars as usize
    }

    fn zero_like(&self) -> Self {
        Self::constant_of(self.v.lit(0.0), self.nvars())
    }

    /// Gradient component `∂_i`.
    pub fn grad(&self, i: usize) -> T {
        self.g[i]
    }

    /// Hessian component `∂_i ∂_j`; permuted reads hit the canonical slot.
    pub fn hess(&self, i: usize, j: usize) -> T {
        self.h[layout(self.nvars()).hess_index(i, j)]
    }

    /// Third derivative `∂_i ∂_j ∂_k`, canonical slot for any permutation.
    pub fn third(&self, i: usize, j: usize, k: usize) -> T {
        self.t[layout(self.nvars()).third_index(i, j, k)]
    }

    /// Multiply every component by a scalar of the backend (a parameter
    /// that may itself be differentiated, unlike [`Self::scale`]).
    pub fn mul_s(&self, k: T) -> Self {
        let lay = layout(self.nvars());
        let mut out = *self;
        out.v = out.v * k;
        for i in 0..lay.nvars {
            out.g[i] = out.g[i] * k;
        }
        for s in 0..lay.n_hess {
            out.h[s] = out.h[s] * k;
        }
        for s in 0..lay.n_third {
            out.t[s] = out.t[s] * k;
        }
        out
    }

    /// Multiply by a plain constant.
    pub fn scale(&self, k: f64) -> Self {
        let lay = layout(self.nvars());
        let mut out = *self;
        out.v = out.v.scale(k);
        for i in 0..lay.nvars {
            out.g[i] = out.g[i].scale(k);
        }
        for s in 0..lay.n_hess {
            out.h[s] = out.h[s].scale(k);
        }
        for s in 0..lay.n_third {
            out.t[s] = out.t[s].scale(k);
        }
        out
    }

    /// Composition with a univariate function given its value and first
    /// three derivatives at `self.v` (Faa di Bruno through order 3).
    pub fn compose(&self, phi: [T; 4]) -> Self {
        let lay = layout(self.nvars());
        let mut out = self.zero_like();
        out.v = phi[0];
        for i in 0..lay.nvars {
            out.g[i] = phi[1] * self.g[i];
        }
        for s in 0..lay.n_hess {
            let (i, j) = lay.hess_pairs[s];
            let (i, j) = (i as usize, j as usize);
            out.h[s] = phi[2] * self.g[i] * self.g[j] + phi[1] * self.h[s];
        }
        for s in 0..lay.n_third {
            let (i, j, k) = lay.third_triples[s];
            let (i, j, k) = (i as usize, j as usize, k as usize);
            let hij = self.h[lay.hess_index(i, j)];
            let hik = self.h[lay.hess_index(i, k)];
            let hjk = self.h[lay.hess_index(j, k)];
            out.t[s] = phi[3] * self.g[i] * self.g[j] * self.g[k]
                + phi[2] * (hij * self.g[k] + hik * self.g[j] + hjk * self.g[i])
                + phi[1] * self.t[s];
        }
        out
    }

    /// Hyperbolic tangent through order 3.
    pub fn tanh(&self) -> Self {
        self.compose(tanh_derivatives(self.v))
    }

    pub fn exp(&self) -> Self {
        let e = self.v.exp_s();
        self.compose([e, e, e, e])
    }

    pub fn sin(&self) -> Self {
        let s = self.v.sin_s();
        let c = self.v.cos_s();
        self.compose([s, c, -s, -c])
    }

    pub fn cos(&self) -> Self {
        let s = self.v.sin_s();
        let c = self.v.cos_s();
        self.compose([c, -s, -c, s])
    }

    /// Division that reports an exact-zero denominator instead of
    /// propagating IEEE infinities.
    pub fn checked_div(&self, rhs: &Self) -> Result<Self, JetError> {
        if rhs.v.value() == 0.0 {
            return Err(JetError::DivisionSingularity);
        }
        Ok(*self / *rhs)
    }
}

/// `tanh` and its first three derivatives at a point, shared by every
/// evaluation path so the arithmetic is identical everywhere.
#[inline]
pub fn tanh_derivatives<T: Scalar>(x: T) -> [T; 4] {
    let t = x.tanh_s();
    let d1 = t.lit(1.0) - t * t;
    let d2 = t.scale(-2.0) * d1;
    let d3 = (d1 * d1 + t * d2).scale(-2.0);
    [t, d1, d2, d3]
}

impl<T: Scalar> Add for Jet3<T> {
    type Output = Jet3<T>;
    fn add(self, rhs: Jet3<T>) -> Jet3<T> {
        debug_assert_eq!(self.nvars, rhs.nvars);
        let lay = layout(self.nvars());
        let mut out = self;
        out.v = out.v + rhs.v;
        for i in 0..lay.nvars {
            out.g[i] = out.g[i] + rhs.g[i];
        }
        for s in 0..lay.n_hess {
            out.h[s] = out.h[s] + rhs.h[s];
        }
        for s in 0..lay.n_third {
            out.t[s] = out.t[s] + rhs.t[s];
        }
        out
    }
}

impl<T: Scalar> Sub for Jet3<T> {
    type Output = Jet3<T>;
    fn sub(self, rhs: Jet3<T>) -> Jet3<T> {
        debug_assert_eq!(self.nvars, rhs.nvars);
        let lay = layout(self.nvars());
        let mut out = self;
        out.v = out.v - rhs.v;
        for i in 0..lay.nvars {
            out.g[i] = out.g[i] - rhs.g[i];
        }
        for s in 0..lay.n_hess {
            out.h[s] = out.h[s] - rhs.h[s];
        }
        for s in 0..lay.n_third {
            out.t[s] = out.t[s] - rhs.t[s];
        }
        out
    }
}

impl<T: Scalar> Neg for Jet3<T> {
    type Output = Jet3<T>;
    fn neg(self) -> Jet3<T> {
        let lay = layout(self.nvars());
        let mut out = self;
        out.v = -out.v;
        for i in 0..lay.nvars {
            out.g[i] = -out.g[i];
        }
        for s in 0..lay.n_hess {
            out.h[s] = -out.h[s];
        }
        for s in 0..lay.n_third {
            out.t[s] = -out.t[s];
        }
        out
    }
}

impl<T: Scalar> Mul for Jet3<T> {
    type Output = Jet3<T>;
    fn mul(self, rhs: Jet3<T>) -> Jet3<T> {
        debug_assert_eq!(self.nvars, rhs.nvars);
        let lay = layout(self.nvars());
        let (a, b) = (&self, &rhs);
        let mut out = self.zero_like();
        out.v = a.v * b.v;
        for i in 0..lay.nvars {
            out.g[i] = a.v * b.g[i] + a.g[i] * b.v;
        }
        for s in 0..lay.n_hess {
            let (i, j) = lay.hess_pairs[s];
            let (i, j) = (i as usize, j as usize);
            out.h[s] = a.v * b.h[s] + a.g[i] * b.g[j] + a.g[j] * b.g[i] + a.h[s] * b.v;
        }
        for s in 0..lay.n_third {
            let (i, j, k) = lay.third_triples[s];
            let (i, j, k) = (i as usize, j as usize, k as usize);
            let (ij, ik, jk) =
                (lay.hess_index(i, j), lay.hess_index(i, k), lay.hess_index(j, k));
            out.t[s] = a.v * b.t[s]
                + a.g[i] * b.h[jk]
                + a.g[j] * b.h[ik]
                + a.g[k] * b.h[ij]
                + a.h[jk] * b.g[i]
                + a.h[ik] * b.g[j]
                + a.h[ij] * b.g[k]
                + a.t[s] * b.v;
        }
        out
    }
}

impl<T: Scalar> Div for Jet3<T> {
    type Output = Jet3<T>;
    fn div(self, rhs: Jet3<T>) -> Jet3<T> {
        debug_assert_eq!(self.nvars, rhs.nvars);
        let lay = layout(self.nvars());
        let (a, b) = (&self, &rhs);
        let mut q = self.zero_like();
        q.v = a.v / b.v;
        for i in 0..lay.nvars {
            q.g[i] = (a.g[i] - q.v * b.g[i]) / b.v;
        }
        for s in 0..lay.n_hess {
            let (i, j) = lay.hess_pairs[s];
            let (i, j) = (i as usize, j as usize);
            q.h[s] = (a.h[s] - q.g[i] * b.g[j] - q.g[j] * b.g[i] - q.v * b.h[s]) / b.v;
        }
        for s in 0..lay.n_third {
            let (i, j, k) = lay.third_triples[s];
            let (i, j, k) = (i as usize, j as usize, k as usize);
            let (ij, ik, jk) =
                (lay.hess_index(i, j), lay.hess_index(i, k), lay.hess_index(j, k));
            q.t[s] = (a.t[s]
                - q.h[ij] * b.g[k]
                - q.h[ik] * b.g[j]
                - q.h[jk] * b.g[i]
                - q.g[i] * b.h[jk]
                - q.g[j] * b.h[ik]
                - q.g[k] * b.h[ij]
                - q.v * b.t[s])
                / b.v;
        }
        q
    }
}

impl Jet3<f64> {
    /// Seed jet for differentiation variable `index` out of `nvars`.
    pub fn variable(index: usize, value: f64, nvars: usize) -> Result<Self, JetError> {
        if nvars > MAX_VARS {
            return Err(JetError::TooManyVariables(nvars));
        }
        if index >= nvars {
            return Err(JetError::VariableIndex { index, nvars });
        }
        Ok(Self::variable_of(value, index, nvars))
    }

    /// Constant jet.
    pub fn constant(value: f64, nvars: usize) -> Result<Self, JetError> {
        if nvars > MAX_VARS {
            return Err(JetError::TooManyVariables(nvars));
        }
        Ok(Self::constant_of(value, nvars))
    }
}

/// First-order dual number with up to four tangent directions: the physics
/// extraction algebra runs on these once the assembled tensor and its first
/// derivatives are known.
#[derive(Debug, Clone, Copy)]
pub struct Dual<T> {
    nd: u8,
    pub v: T,
    pub d: [T; MAX_VARS],
}

impl<T: Scalar> Dual<T> {
    pub fn new(v: T, d: [T; MAX_VARS], nd: usize) -> Self {
        Dual { nd: nd as u8, v, d }
    }

    pub fn constant(v: T, nd: usize) -> Self {
        let z = v.lit(0.0);
        Dual { nd: nd as u8, v, d: [z; MAX_VARS] }
    }

    pub fn nd(&self) -> usize {
        self.nd as usize
    }

    pub fn scale(&self, k: f64) -> Self {
        let mut out = *self;
        out.v = out.v.scale(k);
        for e in 0..self.nd() {
            out.d[e] = out.d[e].scale(k);
        }
        out
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Dual<T>;
    fn add(self, rhs: Dual<T>) -> Dual<T> {
        debug_assert_eq!(self.nd, rhs.nd);
        let mut out = self;
        out.v = out.v + rhs.v;
        for e in 0..self.nd() {
            out.d[e] = out.d[e] + rhs.d[e];
        }
        out
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Dual<T>;
    fn sub(self, rhs: Dual<T>) -> Dual<T> {
        debug_assert_eq!(self.nd, rhs.nd);
        let mut out = self;
        out.v = out.v - rhs.v;
        for e in 0..self.nd() {
            out.d[e] = out.d[e] - rhs.d[e];
        }
        out
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Dual<T>;
    fn neg(self) -> Dual<T> {
        let mut out = self;
        out.v = -out.v;
        for e in 0..self.nd() {
            out.d[e] = -out.d[e];
        }
        out
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Dual<T>;
    fn mul(self, rhs: Dual<T>) -> Dual<T> {
        debug_assert_eq!(self.nd, rhs.nd);
        let mut out = self;
        out.v = self.v * rhs.v;
        for e in 0..self.nd() {
            out.d[e] = self.v * rhs.d[e] + self.d[e] * rhs.v;
        }
        out
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Dual<T>;
    fn div(self, rhs: Dual<T>) -> Dual<T> {
        debug_assert_eq!(self.nd, rhs.nd);
        let mut out = self;
        out.v = self.v / rhs.v;
        for e in 0..self.nd() {
            out.d[e] = (self.d[e] - out.v * rhs.d[e]) / rhs.v;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Recording tape for reverse-mode parameter gradients.
// ---------------------------------------------------------------------------

const NONE: u32 = u32::MAX;

const OP_NAMES: [&str; 12] = [
    "input", "lit", "add", "sub", "mul", "div", "neg", "scale", "tanh", "exp", "sin", "cos",
];

#[derive(Clone, Copy)]
struct Node {
    v: f64,
    da: f64,
    db: f64,
    pa: u32,
    pb: u32,
    op: u8,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// A Wengert-list tape of scalar operations.
///
/// Every [`Tv`] operation appends one node with its local partial
/// derivatives; [`Tape::backward`] then accumulates adjoints in a single
/// reverse sweep. Evaluation order is the recording order, so repeated
/// evaluations of the same program are bit-identical.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { inner: RefCell::new(TapeInner::default()) }
    }

    /// Clear all nodes but keep the allocation for reuse.
    pub fn reset(&self) {
        self.inner.borrow_mut().nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, v: f64, pa: u32, da: f64, pb: u32, db: f64, op: u8) -> u32 {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len() as u32;
        inner.nodes.push(Node { v, da, db, pa, pb, op });
        idx
    }

    /// Register an independent input variable.
    pub fn input(&self, v: f64) -> Tv<'_> {
        let idx = self.push(v, NONE, 0.0, NONE, 0.0, 0);
        Tv { tape: self, idx }
    }

    /// Current value of a tape variable.
    pub fn value(&self, var: Tv<'_>) -> f64 {
        self.inner.borrow().nodes[var.idx as usize].v
    }

    /// Reverse sweep from `root` with seed `d(root)=seed`, writing node
    /// adjoints into the reusable buffer. Errors if a non-finite value was
    /// produced anywhere on the tape.
    pub fn backward_into(
        &self,
        root: Tv<'_>,
        seed: f64,
        adj: &mut Vec<f64>,
    ) -> Result<(), JetError> {
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let n = nodes.len();
        if !nodes[root.idx as usize].v.is_finite() {
            let node = nodes.iter().position(|nd| !nd.v.is_finite()).unwrap();
            return Err(JetError::NonFinite { node, op: OP_NAMES[nodes[node].op as usize] });
        }
        adj.clear();
        adj.resize(n, 0.0);
        adj[root.idx as usize] = seed;
        for i in (0..n).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let nd = &nodes[i];
            if nd.pa != NONE {
                adj[nd.pa as usize] += nd.da * a;
            }
            if nd.pb != NONE {
                adj[nd.pb as usize] += nd.db * a;
            }
        }
        Ok(())
    }

    /// Allocating wrapper around [`Self::backward_into`].
    pub fn backward(&self, root: Tv<'_>, seed: f64) -> Result<Vec<f64>, JetError> {
        let mut adj = Vec::new();
        self.backward_into(root, seed, &mut adj)?;
        Ok(adj)
    }
}

/// A scalar variable living on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tv<'t> {
    tape: &'t Tape,
    idx: u32,
}

impl<'t> Tv<'t> {
    pub fn index(&self) -> usize {
        self.idx as usize
    }
}

impl<'t> Add for Tv<'t> {
    type Output = Tv<'t>;
    fn add(self, rhs: Tv<'t>) -> Tv<'t> {
        let v = self.tape.value(self) + self.tape.value(rhs);
        let idx = self.tape.push(v, self.idx, 1.0, rhs.idx, 1.0, 2);
        Tv { tape: self.tape, idx }
    }
}

impl<'t> Sub for Tv<'t> {
    type Output = Tv<'t>;
    fn sub(self, rhs: Tv<'t>) -> Tv<'t> {
        let v = self.tape.value(self) - self.tape.value(rhs);
        let idx = self.tape.push(v, self.idx, 1.0, rhs.idx, -1.0, 3);
        Tv { tape: self.tape, idx }
    }
}

impl<'t> Mul for Tv<'t> {
    type Output = Tv<'t>;
    fn mul(self, rhs: Tv<'t>) -> Tv<'t> {
        let (va, vb) = (self.tape.value(self), self.tape.value(rhs));
        let idx = self.tape.push(va * vb, self.idx, vb, rhs.idx, va, 4);
        Tv { tape: self.tape, idx }
    }
}

impl<'t> Div for Tv<'t> {
    type Output = Tv<'t>;
    fn div(self, rhs: Tv<'t>) -> Tv<'t> {
        let (va, vb) = (self.tape.value(self), self.tape.value(rhs));
        let v = va / vb;
        let idx = self.tape.push(v, self.idx, 1.0 / vb, rhs.idx, -v / vb, 5);
        Tv { tape: self.tape, idx }
    }
}

impl<'t> Neg for Tv<'t> {
    type Output = Tv<'t>;
    fn neg(self) -> Tv<'t> {
        let v = -self.tape.value(self);
        let idx = self.tape.push(v, self.idx, -1.0, NONE, 0.0, 6);
        Tv { tape: self.tape, idx }
    }
}

impl<'t> Scalar for Tv<'t> {
    fn lit(self, v: f64) -> Self {
        let idx = self.tape.push(v, NONE, 0.0, NONE, 0.0, 1);
        Tv { tape: self.tape, idx }
    }
    fn scale(self, k: f64) -> Self {
        let v = self.tape.value(self) * k;
        let idx = self.tape.push(v, self.idx, k, NONE, 0.0, 7);
        Tv { tape: self.tape, idx }
    }
    fn value(self) -> f64 {
        self.tape.value(self)
    }
    fn tanh_s(self) -> Self {
        let t = self.tape.value(self).tanh();
        let idx = self.tape.push(t, self.idx, 1.0 - t * t, NONE, 0.0, 8);
        Tv { tape: self.tape, idx }
    }
    fn exp_s(self) -> Self {
        let e = self.tape.value(self).exp();
        let idx = self.tape.push(e, self.idx, e, NONE, 0.0, 9);
        Tv { tape: self.tape, idx }
    }
    fn sin_s(self) -> Self {
        let x = self.tape.value(self);
        let idx = self.tape.push(x.sin(), self.idx, x.cos(), NONE, 0.0, 10);
        Tv { tape: self.tape, idx }
    }
    fn cos_s(self) -> Self {
        let x = self.tape.value(self);
        let idx = self.tape.push(x.cos(), self.idx, -x.sin(), NONE, 0.0, 11);
        Tv { tape: self.tape, idx }
    }
}

/// A scalar-valued computation over a parameter vector, recorded on a tape
/// so the derivative with respect to every parameter can be accumulated.
pub trait LossProgram {
    fn param_count(&self) -> usize;
    /// Build the scalar loss from the registered parameter variables.
    fn build<'t>(&self, tape: &'t Tape, params: &[Tv<'t>]) -> Tv<'t>;
}

/// Loss value and its gradient with respect to every parameter.
pub fn loss_and_parameter_gradient(
    program: &dyn LossProgram,
    params: &[f64],
) -> Result<(f64, Vec<f64>), JetError> {
    assert_eq!(params.len(), program.param_count());
    let tape = Tape::new();
    let vars: Vec<Tv> = params.iter().map(|&p| tape.input(p)).collect();
    let root = program.build(&tape, &vars);
    let loss = tape.value(root);
    let adj = tape.backward(root, 1.0)?;
    Ok((loss, vars.iter().map(|v| adj[v.index()]).collect()))
}

/// Gradient of the program's scalar output with respect to every parameter.
pub fn parameter_gradient(
    program: &dyn LossProgram,
    params: &[f64],
) -> Result<Vec<f64>, JetError> {
    loss_and_parameter_gradient(program, params).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn variable_seeds() {
        let j = Jet3::variable(0, 2.5, 2).unwrap();
        assert_eq!(j.v, 2.5);
        assert_eq!(j.g[0], 1.0);
        assert_eq!(j.g[1], 0.0);
        assert!(j.h.iter().all(|&x| x == 0.0));
        assert!(j.t.iter().all(|&x| x == 0.0));

        let j = Jet3::variable(1, 0.0, 3).unwrap();
        assert_eq!([j.g[0], j.g[1], j.g[2]], [0.0, 1.0, 0.0]);

        let c = Jet3::constant(7.0, 3).unwrap();
        assert!(c.g.iter().chain(c.h.iter()).chain(c.t.iter()).all(|&x| x == 0.0));

        assert!(Jet3::variable(2, 0.0, 2).is_err());
        assert!(Jet3::constant(0.0, 5).is_err());
    }

    #[test]
    fn product_of_variables() {
        // f = x * x at x = 1: value 1, d1 2, d2 2, d3 0.
        let x = Jet3::variable(0, 1.0, 1).unwrap();
        let f = x * x;
        assert_eq!(f.v, 1.0);
        assert_eq!(f.g[0], 2.0);
        assert_eq!(f.h[0], 2.0);
        assert_eq!(f.t[0], 0.0);
    }

    #[test]
    fn rational_taylor_series() {
        // h = 1/(1+x^2) at x=0: 1 - x^2 + ... so d1=0, d2=-2, d3=0.
        let x = Jet3::variable(0, 0.0, 1).unwrap();
        let one = Jet3::constant(1.0, 1).unwrap();
        let h = one / (one + x * x);
        assert_eq!(h.v, 1.0);
        assert_eq!(h.g[0], 0.0);
        assert_eq!(h.h[0], -2.0);
        assert_eq!(h.t[0], 0.0);
    }

    #[test]
    fn quintic_third_derivative() {
        // f = x^2 * x^3 = x^5 at x=1: f''' = 60.
        let x = Jet3::variable(0, 1.0, 1).unwrap();
        let f = (x * x) * (x * x * x);
        assert_eq!(f.t[0], 60.0);
    }

    #[test]
    fn tanh_at_zero_and_one() {
        let x = Jet3::variable(0, 0.0, 1).unwrap();
        let y = x.tanh();
        assert_eq!(y.v, 0.0);
        assert_eq!(y.g[0], 1.0);
        assert_eq!(y.h[0], 0.0);
        assert_eq!(y.t[0], -2.0);

        let x = Jet3::variable(0, 1.0, 1).unwrap();
        let y = x.tanh();
        let t = 1f64.tanh();
        assert_relative_eq!(y.v, t, max_relative = 1e-15);
        assert_relative_eq!(y.g[0], 1.0 - t * t, max_relative = 1e-14);
    }

    /// Central finite differences of a univariate scalar function.
    fn fd1(f: &dyn Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }
    fn fd2(f: &dyn Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
    }
    fn fd3(f: &dyn Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + 2.0 * h) - 2.0 * f(x + h) + 2.0 * f(x - h) - f(x - 2.0 * h)) / (2.0 * h * h * h)
    }

    #[test]
    fn tanh_orders_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let f = |x: f64| x.tanh();
        for _ in 0..20 {
            let x0: f64 = rng.gen_range(-2.0..2.0);
            let jet = Jet3::variable(0, x0, 1).unwrap().tanh();
            let scale = |v: f64| v.abs().max(1e-3);
            let d1 = fd1(&f, x0, 1e-6);
            let d2 = fd2(&f, x0, 1e-4);
            let d3 = fd3(&f, x0, 1e-3);
            assert!((jet.g[0] - d1).abs() / scale(d1) < 1e-6);
            assert!((jet.h[0] - d2).abs() / scale(d2) < 1e-5);
            assert!((jet.t[0] - d3).abs() / scale(d3) < 1e-4);
        }
    }

    #[test]
    fn multivariate_product_symmetry_is_structural() {
        let x = Jet3::variable(0, 0.7, 3).unwrap();
        let y = Jet3::variable(1, -0.3, 3).unwrap();
        let z = Jet3::variable(2, 1.1, 3).unwrap();
        let f = (x * y * z + x * x * y).tanh();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(f.hess(i, j), f.hess(j, i));
                for k in 0..3 {
                    assert_eq!(f.third(i, j, k), f.third(k, j, i));
                    assert_eq!(f.third(i, j, k), f.third(j, i, k));
                }
            }
        }
    }

    #[test]
    fn checked_div_rejects_zero() {
        let x = Jet3::variable(0, 0.0, 1).unwrap();
        let one = Jet3::constant(1.0, 1).unwrap();
        assert!(matches!(one.checked_div(&x), Err(JetError::DivisionSingularity)));
        assert!(x.checked_div(&one).is_ok());
    }

    #[test]
    fn chain_rule_on_polynomials_is_exact() {
        // f(g(x)) for f = u^2 + u, g = x^3 - 2x at x = 0.9, exact to roundoff.
        let x0 = 0.9;
        let x = Jet3::variable(0, x0, 1).unwrap();
        let g = x * x * x - x.scale(2.0);
        let f = g * g + g;
        // Analytic: g = x^3-2x, g'=3x^2-2, g''=6x, g'''=6; f(u)=u^2+u.
        let (gv, g1, g2, g3) = (x0 * x0 * x0 - 2.0 * x0, 3.0 * x0 * x0 - 2.0, 6.0 * x0, 6.0);
        assert_relative_eq!(f.v, gv * gv + gv, max_relative = 1e-15);
        assert_relative_eq!(f.g[0], (2.0 * gv + 1.0) * g1, max_relative = 1e-14);
        assert_relative_eq!(f.h[0], 2.0 * g1 * g1 + (2.0 * gv + 1.0) * g2, max_relative = 1e-14);
        assert_relative_eq!(
            f.t[0],
            6.0 * g1 * g2 + (2.0 * gv + 1.0) * g3,
            max_relative = 1e-14
        );
    }

    struct SquareLoss;
    impl LossProgram for SquareLoss {
        fn param_count(&self) -> usize {
            2
        }
        fn build<'t>(&self, _tape: &'t Tape, p: &[Tv<'t>]) -> Tv<'t> {
            p[0] * p[0] + p[1] * p[1]
        }
    }

    #[test]
    fn parameter_gradient_quadratic() {
        let g = parameter_gradient(&SquareLoss, &[1.0, -2.0]).unwrap();
        assert_eq!(g, vec![2.0, -4.0]);
    }

    struct ConstLoss;
    impl LossProgram for ConstLoss {
        fn param_count(&self) -> usize {
            3
        }
        fn build<'t>(&self, tape: &'t Tape, _p: &[Tv<'t>]) -> Tv<'t> {
            tape.input(4.0)
        }
    }

    #[test]
    fn parameter_gradient_constant_is_zero() {
        let g = parameter_gradient(&ConstLoss, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    struct DivLoss;
    impl LossProgram for DivLoss {
        fn param_count(&self) -> usize {
            1
        }
        fn build<'t>(&self, tape: &'t Tape, p: &[Tv<'t>]) -> Tv<'t> {
            tape.input(1.0) / (p[0] - p[0].lit(1.0))
        }
    }

    #[test]
    fn non_finite_reports_location() {
        let err = parameter_gradient(&DivLoss, &[1.0]).unwrap_err();
        match err {
            JetError::NonFinite { op, .. } => assert_eq!(op, "div"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    struct LinComb {
        alpha: f64,
    }
    impl LossProgram for LinComb {
        fn param_count(&self) -> usize {
            3
        }
        fn build<'t>(&self, _tape: &'t Tape, p: &[Tv<'t>]) -> Tv<'t> {
            // alpha * L1 + L2 with L1 = sum p^2, L2 = p0*p1*p2.
            let l1 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
            let l2 = p[0] * p[1] * p[2];
            l1.scale(self.alpha) + l2
        }
    }

    #[test]
    fn parameter_gradient_is_linear_in_the_loss() {
        let theta = [0.3, -1.2, 0.8];
        let g_sum = parameter_gradient(&LinComb { alpha: 2.5 }, &theta).unwrap();
        let g1 = parameter_gradient(&LinComb { alpha: 1.0 }, &theta).unwrap(); // L1 + L2
        let g0 = parameter_gradient(&LinComb { alpha: 0.0 }, &theta).unwrap(); // L2
        for k in 0..3 {
            let l1_only = g1[k] - g0[k];
            assert_relative_eq!(g_sum[k], 2.5 * l1_only + g0[k], max_relative = 1e-14);
        }
    }

    #[test]
    fn tape_evaluation_is_deterministic() {
        let prog = LinComb { alpha: 1.7 };
        let theta = [0.11, 0.22, 0.33];
        let (l1, g1) = loss_and_parameter_gradient(&prog, &theta).unwrap();
        let (l2, g2) = loss_and_parameter_gradient(&prog, &theta).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn jets_on_tape_match_plain_jets() {
        // The same jet formulas must produce identical values on both
        // scalar backends.
        let tape = Tape::new();
        let xv = tape.input(0.4);
        let yv = tape.input(-0.9);
        let xt = Jet3::variable_of(xv, 0, 2);
        let yt = Jet3::variable_of(yv, 1, 2);
        let ft = ((xt * yt).tanh() + xt).exp();

        let x = Jet3::variable(0, 0.4, 2).unwrap();
        let y = Jet3::variable(1, -0.9, 2).unwrap();
        let f = ((x * y).tanh() + x).exp();

        assert_eq!(ft.v.value().to_bits(), f.v.to_bits());
        for i in 0..2 {
            assert_eq!(ft.g[i].value().to_bits(), f.g[i].to_bits());
        }
        for s in 0..3 {
            assert_eq!(ft.h[s].value().to_bits(), f.h[s].to_bits());
        }
        for s in 0..4 {
            assert_eq!(ft.t[s].value().to_bits(), f.t[s].to_bits());
        }
    }
}
