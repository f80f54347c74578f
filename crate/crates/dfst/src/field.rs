//! Assembly of the divergence-free symmetric tensor field and extraction of
//! physical fields.
//!
//! The assembled field is
//!
//! ```text
//! S_ab(x) = Σ_(i,j) active  Σ_(c,d)  T^(i,j)[a][c][b][d] · ∂_c ∂_d c_ij(x)   (+ I)
//! ```
//!
//! Summing the symmetric third derivative `∂_b ∂_c ∂_d c_ij` against the
//! second-pair antisymmetry of `T` makes every row divergence vanish
//! identically, so the only divergence a finite-difference probe can see is
//! its own truncation error. `S` is assembled in upper-triangle storage and
//! mirrored, which makes `S = Sᵀ` bit-exact.
//!
//! First derivatives `∂_e S_ab` come from the order-3 jet components of the
//! coefficients, so loss terms that differentiate extracted fields are
//! analytically exact as well.

use serde::Serialize;
use thiserror::Error;

use crate::basis::{build_riemann_basis, RiemannBasisTensor, TwoFormBasis};
use crate::jet::{Dual, Jet3, Scalar};
use crate::network::{CoefficientNetwork, NetworkError};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("slot map entry ({0}, {1}) is not a valid basis slot")]
    SlotMapInvalid(usize, usize),
    #[error("point has {got} coordinates, field expects {expected}")]
    PointDimension { got: usize, expected: usize },
    #[error("network outputs {got} coefficients, slot map has {expected}")]
    OutputWidth { got: usize, expected: usize },
    #[error("density {rho:.3e} fell below the floor {floor:.3e}")]
    DensityUnderflow { rho: f64, floor: f64 },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Default density floor guarding every division by `ρ`.
pub const RHO_FLOOR: f64 = 1e-6;

/// Upper-triangle length for an `n × n` symmetric matrix.
pub fn sym_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Upper-triangle slot of `(a, b)` in row-major order, any index order.
pub fn sym_slot(n: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    a * (2 * n - a + 1) / 2 + (b - a)
}

/// Precomputed sparse contraction from coefficient jet components to the
/// symmetric tensor value and its first derivatives.
#[derive(Debug, Clone)]
pub struct AssemblyTables {
    dim: usize,
    active: Vec<(usize, usize)>,
    /// `s_terms[o][ab] = [(hess_slot, weight)]`
    pub(crate) s_terms: Vec<Vec<Vec<(usize, f64)>>>,
    /// `ds_terms[o][e][ab] = [(third_slot, weight)]`
    pub(crate) ds_terms: Vec<Vec<Vec<Vec<(usize, f64)>>>>,
}

impl AssemblyTables {
    /// Build contraction tables for the given active coefficient slots.
    pub fn new(basis: &TwoFormBasis, active: &[(usize, usize)]) -> Result<Self, FieldError> {
        let m = basis.count();
        for &(i, j) in active {
            if i == 0 || j == 0 || i > m || j > m || i > j {
                return Err(FieldError::SlotMapInvalid(i, j));
            }
        }
        let dim = basis.dim();
        let all = build_riemann_basis(basis);
        let lay = crate::jet::layout(dim);
        let u = sym_len(dim);
        let mut s_terms = Vec::with_capacity(active.len());
        let mut ds_terms = Vec::with_capacity(active.len());
        for &(i, j) in active {
            let tensor: &RiemannBasisTensor =
                all.iter().find(|t| (t.i, t.j) == (i, j)).expect("validated slot");
            let mut s_rows = vec![vec![0.0; lay.n_hess]; u];
            let mut ds_rows = vec![vec![vec![0.0; lay.n_third]; u]; dim];
            for a in 0..dim {
                for b in a..dim {
                    let ab = sym_slot(dim, a, b);
                    for c in 0..dim {
                        for d in 0..dim {
                            let w = tensor.get(a, c, b, d) as f64;
                            if w == 0.0 {
                                continue;
                            }
                            s_rows[ab][lay.hess_index(c, d)] += w;
                            for e in 0..dim {
                                ds_rows[e][ab][lay.third_index(c, d, e)] += w;
                            }
                        }
                    }
                }
            }
            let compress = |row: &Vec<f64>| -> Vec<(usize, f64)> {
                row.iter().enumerate().filter(|(_, w)| **w != 0.0).map(|(s, w)| (s, *w)).collect()
            };
            s_terms.push(s_rows.iter().map(compress).collect());
            ds_terms.push(
                ds_rows.iter().map(|per_e| per_e.iter().map(compress).collect()).collect(),
            );
        }
        Ok(AssemblyTables { dim, active: active.to_vec(), s_terms, ds_terms })
    }

    /// Tables for the full (unmasked) slot set.
    pub fn full(basis: &TwoFormBasis) -> Self {
        Self::new(basis, &basis.coefficient_slots()).expect("canonical slots are valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Active slots in table order; network output `k` feeds slot `k`.
    pub fn active_slots(&self) -> &[(usize, usize)] {
        &self.active
    }

    /// Whether a tensor component receives any contribution at all
    /// (the masked `S_00` row must not).
    pub fn component_has_terms(&self, a: usize, b: usize) -> bool {
        let ab = sym_slot(self.dim, a, b);
        self.s_terms.iter().any(|rows| !rows[ab].is_empty())
    }
}

/// Assembled symmetric tensor with first derivatives, generic over the
/// scalar backend. Entry `ab` is a [`Dual`]: value `S_ab` plus the
/// space-time tangents `∂_e S_ab`.
#[derive(Debug, Clone)]
pub struct TensorSample<T> {
    pub dim: usize,
    pub s: Vec<Dual<T>>,
}

impl<T: Scalar> TensorSample<T> {
    pub fn entry(&self, a: usize, b: usize) -> Dual<T> {
        self.s[sym_slot(self.dim, a, b)]
    }
}

/// Contract coefficient jets against the tables. The coefficient list must
/// match the active-slot list of the tables.
pub fn assemble_from_jets<T: Scalar>(
    tables: &AssemblyTables,
    coeffs: &[Jet3<T>],
    identity_offset: bool,
) -> Result<TensorSample<T>, FieldError> {
    if coeffs.len() != tables.active.len() {
        return Err(FieldError::OutputWidth { got: coeffs.len(), expected: tables.active.len() });
    }
    let dim = tables.dim;
    let u = sym_len(dim);
    let zero = if let Some(c) = coeffs.first() { c.v.lit(0.0) } else { panic!("no coefficients") };
    let mut s = vec![Dual::constant(zero, dim); u];
    for (o, jet) in coeffs.iter().enumerate() {
        for ab in 0..u {
            let mut acc = s[ab];
            let mut v = acc.v;
            for &(slot, w) in &tables.s_terms[o][ab] {
                v = v + jet.h[slot].scale(w);
            }
            acc.v = v;
            for e in 0..dim {
                let mut de = acc.d[e];
                for &(slot, w) in &tables.ds_terms[o][e][ab] {
                    de = de + jet.t[slot].scale(w);
                }
                acc.d[e] = de;
            }
            s[ab] = acc;
        }
    }
    if identity_offset {
        for a in 0..dim {
            let ab = sym_slot(dim, a, a);
            s[ab].v = s[ab].v + zero.lit(1.0);
        }
    }
    Ok(TensorSample { dim, s })
}

/// Assembled tensor at a point, in plain `f64` form: the full mirrored
/// matrix, its first derivatives, and the evaluation point.
#[derive(Debug, Clone, Serialize)]
pub struct DfstSample {
    pub dim: usize,
    pub x: Vec<f64>,
    /// `s[a][b]`, mirrored from upper-triangle assembly (bit-exact symmetry).
    pub s: Vec<Vec<f64>>,
    /// `ds[e][a][b] = ∂_e S_ab`.
    pub ds: Vec<Vec<Vec<f64>>>,
}

impl DfstSample {
    pub fn from_tensor(sample: &TensorSample<f64>, x: &[f64]) -> Self {
        let dim = sample.dim;
        let mut s = vec![vec![0.0; dim]; dim];
        let mut ds = vec![vec![vec![0.0; dim]; dim]; dim];
        for a in 0..dim {
            for b in 0..dim {
                let entry = sample.entry(a, b);
                s[a][b] = entry.v;
                for e in 0..dim {
                    ds[e][a][b] = entry.d[e];
                }
            }
        }
        DfstSample { dim, x: x.to_vec(), s, ds }
    }

    pub fn to_tensor(&self) -> TensorSample<f64> {
        let dim = self.dim;
        let mut s = Vec::with_capacity(sym_len(dim));
        for a in 0..dim {
            for b in a..dim {
                let mut d = [0.0; crate::jet::MAX_VARS];
                for e in 0..dim {
                    d[e] = self.ds[e][a][b];
                }
                s.push(Dual::new(self.s[a][b], d, dim));
            }
        }
        TensorSample { dim, s }
    }
}

/// Seed the space-time coordinate jets for a point.
pub fn seed_point(x: &[f64]) -> Vec<Jet3<f64>> {
    let n = x.len();
    x.iter().enumerate().map(|(i, &v)| Jet3::variable(i, v, n).expect("n <= 4")).collect()
}

/// Evaluate the network and assemble the tensor field at `x`.
pub fn assemble(
    net: &CoefficientNetwork,
    tables: &AssemblyTables,
    x: &[f64],
    identity_offset: bool,
) -> Result<DfstSample, FieldError> {
    if x.len() != tables.dim {
        return Err(FieldError::PointDimension { got: x.len(), expected: tables.dim });
    }
    let jets = seed_point(x);
    let coeffs = net.forward_jet(&jets)?;
    let sample = assemble_from_jets(tables, &coeffs, identity_offset)?;
    Ok(DfstSample::from_tensor(&sample, x))
}

/// Coefficient slots to drop so that `S_00` receives no network
/// contribution: exactly those `(i, j)` where *both* generating 2-forms
/// contain the time index. With the identity offset this pins `S_00 ≡ 1`
/// and hence exact incompressibility of the extracted velocity.
pub fn incompressibility_mask(basis: &TwoFormBasis) -> Vec<(usize, usize)> {
    let contains_time: Vec<bool> =
        basis.pairs().iter().map(|&(p, q)| p == 0 || q == 0).collect();
    basis
        .coefficient_slots()
        .into_iter()
        .filter(|&(i, j)| contains_time[i - 1] && contains_time[j - 1])
        .collect()
}

/// The complement of [`incompressibility_mask`] in slot order.
pub fn masked_active_slots(basis: &TwoFormBasis) -> Vec<(usize, usize)> {
    let masked = incompressibility_mask(basis);
    basis.coefficient_slots().into_iter().filter(|s| !masked.contains(s)).collect()
}

// ---------------------------------------------------------------------------
// Physical field extraction.
// ---------------------------------------------------------------------------

/// Compressible-flow fields with first derivatives (generic backend).
#[derive(Debug, Clone)]
pub struct EulerFieldsDual<T> {
    pub rho: Dual<T>,
    pub momentum: [Dual<T>; 2],
    pub velocity: [Dual<T>; 2],
    pub sigma: [[Dual<T>; 2]; 2],
    pub pressure: Dual<T>,
    pub sigma_dev: [[Dual<T>; 2]; 2],
    pub energy: Dual<T>,
}

/// Extract density, momentum, stress, pressure, deviatoric stress and total
/// energy from an assembled space-time tensor (dim 3: t, x, y).
pub fn extract_euler_dual<T: Scalar>(
    sample: &TensorSample<T>,
    gamma: f64,
    rho_floor: f64,
) -> Result<EulerFieldsDual<T>, FieldError> {
    debug_assert_eq!(sample.dim, 3);
    let rho = sample.entry(0, 0);
    if rho.v.value() <= rho_floor {
        return Err(FieldError::DensityUnderflow { rho: rho.v.value(), floor: rho_floor });
    }
    let momentum = [sample.entry(1, 0), sample.entry(2, 0)];
    let velocity = [momentum[0] / rho, momentum[1] / rho];
    let mut sigma = [[rho; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            sigma[a][b] = sample.entry(a + 1, b + 1) - momentum[a] * momentum[b] / rho;
        }
    }
    let pressure = (sigma[0][0] + sigma[1][1]).scale(0.5);
    let mut sigma_dev = sigma;
    for a in 0..2 {
        sigma_dev[a][a] = sigma[a][a] - pressure;
    }
    let kinetic =
        (momentum[0] * velocity[0] + momentum[1] * velocity[1]).scale(0.5);
    let energy = pressure.scale(1.0 / (gamma - 1.0)) + kinetic;
    Ok(EulerFieldsDual { rho, momentum, velocity, sigma, pressure, sigma_dev, energy })
}

/// Incompressible-flow fields with first derivatives; `n` spatial axes
/// (2 for plane flows, 3 for the three-dimensional case).
#[derive(Debug, Clone)]
pub struct NsFieldsDual<T> {
    pub n: usize,
    pub velocity: [Dual<T>; 3],
    pub sigma: [[Dual<T>; 3]; 3],
    pub pressure: Dual<T>,
    pub sigma_dev: [[Dual<T>; 3]; 3],
}

pub fn extract_ns_dual<T: Scalar>(sample: &TensorSample<T>) -> NsFieldsDual<T> {
    let n = sample.dim - 1;
    debug_assert!(n == 2 || n == 3);
    let zero = Dual::constant(sample.s[0].v.lit(0.0), sample.dim);
    let mut velocity = [zero; 3];
    for (i, v) in velocity.iter_mut().enumerate().take(n) {
        *v = sample.entry(i + 1, 0);
    }
    let mut sigma = [[zero; 3]; 3];
    for a in 0..n {
        for b in 0..n {
            sigma[a][b] = sample.entry(a + 1, b + 1) - velocity[a] * velocity[b];
        }
    }
    let mut tr = sigma[0][0];
    for (a, row) in sigma.iter().enumerate().take(n).skip(1) {
        tr = tr + row[a];
    }
    let pressure = tr.scale(1.0 / n as f64);
    let mut sigma_dev = sigma;
    for (a, row) in sigma_dev.iter_mut().enumerate().take(n) {
        row[a] = sigma[a][a] - pressure;
    }
    NsFieldsDual { n, velocity, sigma, pressure, sigma_dev }
}

/// MHD fields: velocity from the stress network, magnetic field from the
/// scalar potential, Maxwell stress, and the purely fluid stress that
/// remains after advective and magnetic parts are subtracted.
#[derive(Debug, Clone)]
pub struct MhdFieldsDual<T> {
    pub velocity: [Dual<T>; 2],
    pub b: [Dual<T>; 2],
    /// Spatial Laplacian of each magnetic component (for the induction
    /// residual; third derivatives of the potential).
    pub lap_b: [T; 2],
    pub maxwell: [[Dual<T>; 2]; 2],
    pub sigma: [[Dual<T>; 2]; 2],
    pub pressure: Dual<T>,
    pub sigma_dev: [[Dual<T>; 2]; 2],
}

/// `psi` is the scalar-potential jet at the same point (variables t, x, y).
pub fn extract_mhd_dual<T: Scalar>(
    sample: &TensorSample<T>,
    psi: &Jet3<T>,
) -> MhdFieldsDual<T> {
    debug_assert_eq!(sample.dim, 3);
    let dim = sample.dim;
    // B = (∂_y ψ, -∂_x ψ); tangents of B_i are second derivatives of ψ.
    let bx = {
        let mut d = [psi.v.lit(0.0); crate::jet::MAX_VARS];
        for (e, de) in d.iter_mut().enumerate().take(dim) {
            *de = psi.hess(2, e);
        }
        Dual::new(psi.g[2], d, dim)
    };
    let by = {
        let mut d = [psi.v.lit(0.0); crate::jet::MAX_VARS];
        for (e, de) in d.iter_mut().enumerate().take(dim) {
            *de = -psi.hess(1, e);
        }
        Dual::new(-psi.g[1], d, dim)
    };
    let b = [bx, by];
    let lap_b = [
        psi.third(2, 1, 1) + psi.third(2, 2, 2),
        -(psi.third(1, 1, 1) + psi.third(1, 2, 2)),
    ];
    let ns = extract_ns_dual(sample);
    let velocity = [ns.velocity[0], ns.velocity[1]];
    let b_sq_half = (b[0] * b[0] + b[1] * b[1]).scale(0.5);
    let mut maxwell = [[b_sq_half; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let iso = if i == j { b_sq_half } else { Dual::constant(psi.v.lit(0.0), dim) };
            maxwell[i][j] = iso - b[i] * b[j];
        }
    }
    let mut sigma = [[b_sq_half; 2]; 2];
    for a in 0..2 {
        for bidx in 0..2 {
            sigma[a][bidx] =
                sample.entry(a + 1, bidx + 1) - velocity[a] * velocity[bidx] - maxwell[a][bidx];
        }
    }
    let pressure = (sigma[0][0] + sigma[1][1]).scale(0.5);
    let mut sigma_dev = sigma;
    for a in 0..2 {
        sigma_dev[a][a] = sigma[a][a] - pressure;
    }
    MhdFieldsDual { velocity, b, lap_b, maxwell, sigma, pressure, sigma_dev }
}

// Plain-value views of the extracted fields (the public audit surface).

#[derive(Debug, Clone, Serialize)]
pub struct EulerFields {
    pub rho: f64,
    pub momentum: [f64; 2],
    pub velocity: [f64; 2],
    pub sigma: [[f64; 2]; 2],
    pub pressure: f64,
    pub sigma_dev: [[f64; 2]; 2],
    pub energy: f64,
}

pub fn extract_euler(sample: &DfstSample, gamma: f64) -> Result<EulerFields, FieldError> {
    let dual = extract_euler_dual(&sample.to_tensor(), gamma, RHO_FLOOR)?;
    Ok(EulerFields {
        rho: dual.rho.v,
        momentum: [dual.momentum[0].v, dual.momentum[1].v],
        velocity: [dual.velocity[0].v, dual.velocity[1].v],
        sigma: [
            [dual.sigma[0][0].v, dual.sigma[0][1].v],
            [dual.sigma[1][0].v, dual.sigma[1][1].v],
        ],
        pressure: dual.pressure.v,
        sigma_dev: [
            [dual.sigma_dev[0][0].v, dual.sigma_dev[0][1].v],
            [dual.sigma_dev[1][0].v, dual.sigma_dev[1][1].v],
        ],
        energy: dual.energy.v,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct NsFields {
    pub n: usize,
    pub velocity: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub pressure: f64,
    pub sigma_dev: Vec<Vec<f64>>,
}

pub fn extract_ns(sample: &DfstSample) -> NsFields {
    let dual = extract_ns_dual(&sample.to_tensor());
    let n = dual.n;
    NsFields {
        n,
        velocity: (0..n).map(|i| dual.velocity[i].v).collect(),
        sigma: (0..n).map(|a| (0..n).map(|b| dual.sigma[a][b].v).collect()).collect(),
        pressure: dual.pressure.v,
        sigma_dev: (0..n).map(|a| (0..n).map(|b| dual.sigma_dev[a][b].v).collect()).collect(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MhdFields {
    pub velocity: [f64; 2],
    pub b: [f64; 2],
    pub maxwell: [[f64; 2]; 2],
    pub sigma: [[f64; 2]; 2],
    pub pressure: f64,
    pub sigma_dev: [[f64; 2]; 2],
}

pub fn extract_mhd(sample: &DfstSample, psi: &Jet3<f64>) -> MhdFields {
    let dual = extract_mhd_dual(&sample.to_tensor(), psi);
    MhdFields {
        velocity: [dual.velocity[0].v, dual.velocity[1].v],
        b: [dual.b[0].v, dual.b[1].v],
        maxwell: [
            [dual.maxwell[0][0].v, dual.maxwell[0][1].v],
            [dual.maxwell[1][0].v, dual.maxwell[1][1].v],
        ],
        sigma: [
            [dual.sigma[0][0].v, dual.sigma[0][1].v],
            [dual.sigma[1][0].v, dual.sigma[1][1].v],
        ],
        pressure: dual.pressure.v,
        sigma_dev: [
            [dual.sigma_dev[0][0].v, dual.sigma_dev[0][1].v],
            [dual.sigma_dev[1][0].v, dual.sigma_dev[1][1].v],
        ],
    }
}

/// Central-difference estimate of the row-wise space-time divergence
/// `∂_t S_b0 + Σ_k ∂_k S_bk` of any tensor-valued function. The assembled
/// field is analytically divergence-free, so this measures truncation and
/// roundoff only.
pub fn divergence_fd(
    tensor_at: &dyn Fn(&[f64]) -> Vec<Vec<f64>>,
    x: &[f64],
    h: f64,
) -> Vec<f64> {
    let dim = x.len();
    let mut div = vec![0.0; dim];
    for e in 0..dim {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[e] += h;
        xm[e] -= h;
        let sp = tensor_at(&xp);
        let sm = tensor_at(&xm);
        for b in 0..dim {
            div[b] += (sp[b][e] - sm[b][e]) / (2.0 * h);
        }
    }
    div
}

/// FD divergence of an assembled network field.
pub fn divergence_fd_net(
    net: &CoefficientNetwork,
    tables: &AssemblyTables,
    identity_offset: bool,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>, FieldError> {
    let f = |p: &[f64]| -> Vec<Vec<f64>> {
        assemble(net, tables, p, identity_offset).expect("interior evaluation").s
    };
    if x.len() != tables.dim {
        return Err(FieldError::PointDimension { got: x.len(), expected: tables.dim });
    }
    Ok(divergence_fd(&f, x, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::enumerate_two_forms;

    fn tables_full(dim: usize) -> AssemblyTables {
        AssemblyTables::full(&enumerate_two_forms(dim).unwrap())
    }

    /// Coefficient jets for c(t, x) = x^2 on a 2-d space-time.
    #[test]
    fn assemble_quadratic_coefficient_dim2() {
        let tables = tables_full(2);
        let t = Jet3::variable(0, 0.3, 2).unwrap();
        let x = Jet3::variable(1, -0.7, 2).unwrap();
        let _ = t;
        let c = x * x;
        let s = assemble_from_jets(&tables, &[c], false).unwrap();
        let sample = DfstSample::from_tensor(&s, &[0.3, -0.7]);
        assert_eq!(sample.s, vec![vec![4.0, 0.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn assemble_bilinear_coefficient_dim2() {
        let tables = tables_full(2);
        let t = Jet3::variable(0, 1.1, 2).unwrap();
        let x = Jet3::variable(1, 0.4, 2).unwrap();
        let c = t * x;
        let s = assemble_from_jets(&tables, &[c], false).unwrap();
        let sample = DfstSample::from_tensor(&s, &[1.1, 0.4]);
        assert_eq!(sample.s, vec![vec![0.0, -2.0], vec![-2.0, 0.0]]);
    }

    #[test]
    fn identity_offset_differs_by_exactly_identity() {
        let tables = tables_full(3);
        let net = CoefficientNetwork::init(&[3, 8, 6], 2).unwrap();
        let x = [0.2, 0.5, -0.1];
        let with = assemble(&net, &tables, &x, true).unwrap();
        let without = assemble(&net, &tables, &x, false).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert_eq!(with.s[a][b] - without.s[a][b], expect);
            }
        }
    }

    #[test]
    fn symmetry_is_bit_exact() {
        let tables = tables_full(4);
        let net = CoefficientNetwork::init(&[4, 10, 21], 7).unwrap();
        let sample = assemble(&net, &tables, &[0.1, -0.4, 0.9, 0.3], true).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(sample.s[a][b].to_bits(), sample.s[b][a].to_bits());
                for e in 0..4 {
                    assert_eq!(sample.ds[e][a][b].to_bits(), sample.ds[e][b][a].to_bits());
                }
            }
        }
    }

    #[test]
    fn mask_slots_match_hand_enumeration() {
        let b3 = enumerate_two_forms(3).unwrap();
        assert_eq!(incompressibility_mask(&b3), vec![(1, 1), (1, 2), (2, 2)]);
        assert_eq!(masked_active_slots(&b3), vec![(1, 3), (2, 3), (3, 3)]);

        let b2 = enumerate_two_forms(2).unwrap();
        assert_eq!(incompressibility_mask(&b2), vec![(1, 1)]);
        assert!(masked_active_slots(&b2).is_empty());

        let b4 = enumerate_two_forms(4).unwrap();
        assert_eq!(incompressibility_mask(&b4).len(), 6);
        assert_eq!(masked_active_slots(&b4).len(), 15);
    }

    #[test]
    fn masked_assembly_pins_s00_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let basis = enumerate_two_forms(3).unwrap();
        let active = masked_active_slots(&basis);
        let tables = AssemblyTables::new(&basis, &active).unwrap();
        assert!(!tables.component_has_terms(0, 0));
        for seed in 0..50u64 {
            let net = CoefficientNetwork::init(&[3, 8, active.len()], seed).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sample = assemble(&net, &tables, &x, true).unwrap();
            assert_eq!(sample.s[0][0].to_bits(), 1.0f64.to_bits());
        }
    }

    #[test]
    fn euler_extraction_of_identity() {
        let gamma = 1.4;
        let tables = tables_full(3);
        let mut net = CoefficientNetwork::init(&[3, 4, 6], 0).unwrap();
        let n = net.params().len();
        net.params_mut().copy_from_slice(&vec![0.0; n]); // zero net: S = I
        let sample = assemble(&net, &tables, &[0.0, 0.0, 0.0], true).unwrap();
        let fields = extract_euler(&sample, gamma).unwrap();
        assert_eq!(fields.rho, 1.0);
        assert_eq!(fields.momentum, [0.0, 0.0]);
        assert_eq!(fields.sigma, [[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(fields.pressure, 1.0);
        assert_eq!(fields.sigma_dev, [[0.0, 0.0], [0.0, 0.0]]);
        approx::assert_relative_eq!(fields.energy, 1.0 / (gamma - 1.0));
    }

    #[test]
    fn euler_extraction_invariants() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let tables = tables_full(3);
        for seed in 0..10u64 {
            let net = CoefficientNetwork::init(&[3, 10, 6], seed).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let sample = assemble(&net, &tables, &x, true).unwrap();
            let f = extract_euler(&sample, 1.4).unwrap();
            // trace(sigma_dev) = 0 to roundoff; sigma = p I + sigma_dev.
            assert!((f.sigma_dev[0][0] + f.sigma_dev[1][1]).abs() < 1e-14);
            for a in 0..2 {
                for b in 0..2 {
                    let rebuilt =
                        f.sigma_dev[a][b] + if a == b { f.pressure } else { 0.0 };
                    approx::assert_relative_eq!(rebuilt, f.sigma[a][b], epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn density_floor_guards_division() {
        let tables = tables_full(3);
        let mut net = CoefficientNetwork::init(&[3, 4, 6], 0).unwrap();
        let n = net.params().len();
        net.params_mut().copy_from_slice(&vec![0.0; n]);
        // Without the identity offset density is exactly zero.
        let sample = assemble(&net, &tables, &[0.0, 0.0, 0.0], false).unwrap();
        assert!(matches!(
            extract_euler(&sample, 1.4),
            Err(FieldError::DensityUnderflow { .. })
        ));
    }

    #[test]
    fn ns_masked_velocity_is_divergence_free_by_construction() {
        // Row 0 of div S = 0 reads d/dx u + d/dy v = 0 once S_00 is pinned.
        let basis = enumerate_two_forms(3).unwrap();
        let tables = AssemblyTables::new(&basis, &masked_active_slots(&basis)).unwrap();
        let net = CoefficientNetwork::init(&[3, 12, tables.active_slots().len()], 4).unwrap();
        let x = [0.3, 0.2, -0.6];
        let h = 1e-4;
        let vel = |p: &[f64]| {
            let s = assemble(&net, &tables, p, true).unwrap();
            extract_ns(&s).velocity
        };
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[1] += h;
        xm[1] -= h;
        let dudx = (vel(&xp)[0] - vel(&xm)[0]) / (2.0 * h);
        let (mut yp, mut ym) = (x.to_vec(), x.to_vec());
        yp[2] += h;
        ym[2] -= h;
        let dvdy = (vel(&yp)[1] - vel(&ym)[1]) / (2.0 * h);
        assert!((dudx + dvdy).abs() < 1e-8, "spatial divergence {}", dudx + dvdy);
    }

    #[test]
    fn mhd_potential_field_hand_case() {
        // psi(t, x, y) = x^2  =>  B = (0, -2x); at x = 1: |B|^2 = 4,
        // M = 0.5|B|^2 I - B (x) B = [[2, 0], [0, -2]].
        let x = Jet3::variable(1, 1.0, 3).unwrap();
        let psi = x * x;
        let tables = tables_full(3);
        let mut net = CoefficientNetwork::init(&[3, 4, 6], 0).unwrap();
        let n = net.params().len();
        net.params_mut().copy_from_slice(&vec![0.0; n]);
        let sample = assemble(&net, &tables, &[0.0, 1.0, 0.5], true).unwrap();
        let f = extract_mhd(&sample, &psi);
        assert_eq!(f.b, [0.0, -2.0]);
        assert_eq!(f.maxwell, [[2.0, 0.0], [0.0, -2.0]]);
        assert_eq!(f.maxwell[0][1], f.maxwell[1][0]);
    }

    #[test]
    fn fd_divergence_vanishes_for_polynomial_coefficients() {
        // Cubic coefficients make S linear in x, so central differences are
        // exact up to roundoff.
        let basis = enumerate_two_forms(3).unwrap();
        let tables = AssemblyTables::full(&basis);
        let coeff = |p: &[f64]| -> Vec<Jet3<f64>> {
            let t = Jet3::variable(0, p[0], 3).unwrap();
            let x = Jet3::variable(1, p[1], 3).unwrap();
            let y = Jet3::variable(2, p[2], 3).unwrap();
            vec![
                (x * x * x).scale(0.05) + (t * x * y).scale(0.1),
                (y * y * y).scale(0.02) + (t * t * x).scale(0.07),
                (t * t * t).scale(0.03),
                (x * x * y).scale(0.04),
                (x * y * y).scale(0.06) + (t * x * x).scale(0.01),
                (t * y * y).scale(0.05),
            ]
        };
        let tensor_at = |p: &[f64]| -> Vec<Vec<f64>> {
            let s = assemble_from_jets(&tables, &coeff(p), true).unwrap();
            DfstSample::from_tensor(&s, p).s
        };
        let div = divergence_fd(&tensor_at, &[0.4, -0.2, 0.8], 1e-3);
        for d in div {
            assert!(d.abs() <= 1e-10, "divergence component {d}");
        }
    }

    #[test]
    fn fd_divergence_small_and_second_order_for_networks() {
        let basis = enumerate_two_forms(3).unwrap();
        let tables = AssemblyTables::full(&basis);
        let net = CoefficientNetwork::init(&[3, 16, 16, 6], 12).unwrap();
        let x = [0.25, -0.1, 0.45];
        let div1 = divergence_fd_net(&net, &tables, true, &x, 1e-3).unwrap();
        let div2 = divergence_fd_net(&net, &tables, true, &x, 5e-4).unwrap();
        let max1 = div1.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let max2 = div2.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(max1 <= 1e-6, "divergence {max1}");
        // Halving h cuts the truncation residual by about 4.
        let ratio = max1 / max2.max(1e-300);
        assert!(ratio > 2.0 && ratio < 8.0, "O(h^2) scaling violated: {ratio}");
    }

    #[test]
    fn zero_net_with_identity_offset_has_exactly_zero_divergence() {
        let basis = enumerate_two_forms(3).unwrap();
        let tables = AssemblyTables::full(&basis);
        let mut net = CoefficientNetwork::init(&[3, 4, 6], 0).unwrap();
        let n = net.params().len();
        net.params_mut().copy_from_slice(&vec![0.0; n]);
        let div = divergence_fd_net(&net, &tables, true, &[0.0, 0.3, 0.1], 1e-3).unwrap();
        assert!(div.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn assembly_is_linear_in_the_coefficients() {
        let tables = tables_full(3);
        let mk = |a: f64, b: f64| -> Vec<Jet3<f64>> {
            let t = Jet3::variable(0, 0.3, 3).unwrap();
            let x = Jet3::variable(1, 0.7, 3).unwrap();
            let y = Jet3::variable(2, -0.2, 3).unwrap();
            vec![
                (x * x).scale(a) + (t * y).scale(b),
                (y * y * x).scale(a),
                (t * t).scale(b),
                (x * y).scale(a + b),
                (t * x * y).scale(a),
                (y * t * t).scale(b),
            ]
        };
        let s1 = assemble_from_jets(&tables, &mk(0.4, 0.0), false).unwrap();
        let s2 = assemble_from_jets(&tables, &mk(0.0, 0.9), false).unwrap();
        let s12 = assemble_from_jets(&tables, &mk(0.4, 0.9), false).unwrap();
        for ab in 0..sym_len(3) {
            approx::assert_relative_eq!(
                s12.s[ab].v,
                s1.s[ab].v + s2.s[ab].v,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn bad_slot_map_is_rejected() {
        let basis = enumerate_two_forms(3).unwrap();
        assert!(matches!(
            AssemblyTables::new(&basis, &[(1, 4)]),
            Err(FieldError::SlotMapInvalid(1, 4))
        ));
        assert!(matches!(
            AssemblyTables::new(&basis, &[(2, 1)]),
            Err(FieldError::SlotMapInvalid(2, 1))
        ));
    }
}
