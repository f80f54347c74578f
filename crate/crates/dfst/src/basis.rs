//! Riemann-like tensor bases from 2-forms on flat space-time.
//!
//! On an `N`-dimensional space (time plus `N-1` spatial axes, flat metric)
//! the coordinate 2-forms `ω_(p,q) = e_p* ∧ e_q*`, `p < q`, span `Λ²V*`.
//! Symmetrized products of two such forms give `(0,4)`-tensors
//!
//! ```text
//! T^(i,j)_abcd = ω_i[a,b]·ω_j[c,d] + ω_j[a,b]·ω_i[c,d]
//! ```
//!
//! which are antisymmetric within each index pair and symmetric under pair
//! exchange — the index symmetries of a curvature tensor. The `m(m+1)/2`
//! tensors with `i ≤ j` form a basis of the whole symmetry class, and
//! contracting them against Hessians of scalar functions yields symmetric,
//! identically divergence-free fields (see [`crate::field`]).

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

/// Errors from basis construction and classification.
#[derive(Debug, Error)]
pub enum BasisError {
    #[error("space-time dimension must be at least 2, got {0}")]
    InvalidDimension(usize),
    #[error("tensor has {len} entries, expected {expected} for dimension {dim}")]
    ShapeMismatch { len: usize, expected: usize, dim: usize },
    #[error("tensor does not satisfy the Riemann-like symmetries")]
    NotRiemannLike,
}

/// The ordered basis of coordinate 2-forms on `N`-dimensional space-time.
///
/// Pairs are enumerated lexicographically, which fixes the canonical
/// ordering used everywhere else (coefficient slots, masks, checkpoints).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TwoFormBasis {
    dim: usize,
    pairs: Vec<(usize, usize)>,
}

impl TwoFormBasis {
    /// Space-time dimension `N`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of 2-forms, `m = N(N-1)/2`.
    pub fn count(&self) -> usize {
        self.pairs.len()
    }

    /// The strictly increasing index pairs in lexicographic order.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Evaluation of the `i`-th form (1-based) on the ordered index pair
    /// `(a, b)`: `+1` on its own pair, `-1` on the reversed pair, `0`
    /// otherwise.
    pub fn eval(&self, i: usize, a: usize, b: usize) -> i64 {
        let (p, q) = self.pairs[i - 1];
        if (a, b) == (p, q) {
            1
        } else if (a, b) == (q, p) {
            -1
        } else {
            0
        }
    }

    /// 1-based coefficient slots `(i, j)` with `i ≤ j`, lexicographic.
    pub fn coefficient_slots(&self) -> Vec<(usize, usize)> {
        let m = self.count();
        let mut slots = Vec::with_capacity(m * (m + 1) / 2);
        for i in 1..=m {
            for j in i..=m {
                slots.push((i, j));
            }
        }
        slots
    }
}

/// Enumerate the 2-form basis on `dim`-dimensional space-time.
pub fn enumerate_two_forms(dim: usize) -> Result<TwoFormBasis, BasisError> {
    if dim < 2 {
        return Err(BasisError::InvalidDimension(dim));
    }
    let mut pairs = Vec::with_capacity(dim * (dim - 1) / 2);
    for p in 0..dim {
        for q in (p + 1)..dim {
            pairs.push((p, q));
        }
    }
    Ok(TwoFormBasis { dim, pairs })
}

/// One basis element `T^(i,j)` stored sparsely as signed integer entries.
///
/// Diagonal elements (`i == j`) carry the factor 2 from the symmetrized
/// product; coefficients are always in `{-2, -1, 0, 1, 2}`.
#[derive(Debug, Clone, Serialize)]
pub struct RiemannBasisTensor {
    /// Space-time dimension.
    pub dim: usize,
    /// 1-based indices of the two generating forms, `i ≤ j`.
    pub i: usize,
    pub j: usize,
    /// Nonzero entries keyed by the index quadruple `(a, b, c, d)`.
    pub entries: BTreeMap<(usize, usize, usize, usize), i64>,
}

impl RiemannBasisTensor {
    /// Entry `T^(i,j)_abcd` (zero when absent from the sparse map).
    pub fn get(&self, a: usize, b: usize, c: usize, d: usize) -> i64 {
        self.entries.get(&(a, b, c, d)).copied().unwrap_or(0)
    }
}

/// Build the full basis `{T^(i,j) : 1 ≤ i ≤ j ≤ m}` for the given 2-forms.
///
/// The list has exactly `m(m+1)/2` elements in slot order.
pub fn build_riemann_basis(basis: &TwoFormBasis) -> Vec<RiemannBasisTensor> {
    let m = basis.count();
    let mut out = Vec::with_capacity(m * (m + 1) / 2);
    for i in 1..=m {
        for j in i..=m {
            let (p, q) = basis.pairs[i - 1];
            let (r, s) = basis.pairs[j - 1];
            let mut entries = BTreeMap::new();
            // ω_i[a,b]·ω_j[c,d] contributes on (±(p,q), ±(r,s)),
            // ω_j[a,b]·ω_i[c,d] on (±(r,s), ±(p,q)); the two coincide when i = j.
            for &(a, b, sa) in &[(p, q, 1i64), (q, p, -1i64)] {
                for &(c, d, sc) in &[(r, s, 1i64), (s, r, -1i64)] {
                    *entries.entry((a, b, c, d)).or_insert(0) += sa * sc;
                    *entries.entry((c, d, a, b)).or_insert(0) += sa * sc;
                }
            }
            entries.retain(|_, v| *v != 0);
            out.push(RiemannBasisTensor { dim: basis.dim, i, j, entries });
        }
    }
    out
}

fn quad_index(dim: usize, a: usize, b: usize, c: usize, d: usize) -> usize {
    ((a * dim + b) * dim + c) * dim + d
}

/// Check the three Riemann-like symmetry families on a dense `(0,4)`-tensor
/// given in row-major order `[a][b][c][d]`.
///
/// The check is exact: components must cancel bit-for-bit, which holds for
/// anything assembled from the integer basis or from the oracle's `K`
/// construction.
pub fn check_riemann_symmetries(entries: &[f64], dim: usize) -> Result<bool, BasisError> {
    let expected = dim * dim * dim * dim;
    if entries.len() != expected {
        return Err(BasisError::ShapeMismatch { len: entries.len(), expected, dim });
    }
    let at = |a, b, c, d| entries[quad_index(dim, a, b, c, d)];
    for a in 0..dim {
        for b in 0..dim {
            for c in 0..dim {
                for d in 0..dim {
                    if at(a, b, c, d) != -at(b, a, c, d)
                        || at(a, b, c, d) != -at(a, b, d, c)
                        || at(a, b, c, d) != at(c, d, a, b)
                    {
                        return Ok(false);
                    }
                }
            }
        }
    }
    Ok(true)
}

/// Dense `[a][b][c][d]` layout of a basis element, for tests and expansion.
pub fn to_dense(tensor: &RiemannBasisTensor) -> Vec<f64> {
    let dim = tensor.dim;
    let mut out = vec![0.0; dim * dim * dim * dim];
    for (&(a, b, c, d), &v) in &tensor.entries {
        out[quad_index(dim, a, b, c, d)] = v as f64;
    }
    out
}

/// Expand a Riemann-like tensor in the `{T^(i,j)}` basis.
///
/// Returns the coefficient vector `κ` in slot order such that
/// `Σ κ_ij T^(i,j)` reproduces the input exactly. Fails when the symmetry
/// check fails. Because distinct basis elements occupy disjoint canonical
/// quadruples `(p,q,r,s)` with `p<q`, `r<s`, each coefficient reads off a
/// single entry (halved on the diagonal).
pub fn expand_in_basis(
    entries: &[f64],
    basis: &TwoFormBasis,
) -> Result<Vec<f64>, BasisError> {
    if !check_riemann_symmetries(entries, basis.dim)? {
        return Err(BasisError::NotRiemannLike);
    }
    let dim = basis.dim;
    let m = basis.count();
    let mut coeffs = Vec::with_capacity(m * (m + 1) / 2);
    for i in 1..=m {
        for j in i..=m {
            let (p, q) = basis.pairs[i - 1];
            let (r, s) = basis.pairs[j - 1];
            let raw = entries[quad_index(dim, p, q, r, s)];
            coeffs.push(if i == j { raw / 2.0 } else { raw });
        }
    }
    Ok(coeffs)
}

/// Synthesize `Σ κ_ij T^(i,j)` as a dense tensor (inverse of
/// [`expand_in_basis`]).
pub fn synthesize(coeffs: &[f64], tensors: &[RiemannBasisTensor], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim * dim * dim * dim];
    for (kappa, tensor) in coeffs.iter().zip(tensors) {
        for (&(a, b, c, d), &v) in &tensor.entries {
            out[quad_index(dim, a, b, c, d)] += kappa * v as f64;
        }
    }
    out
}
