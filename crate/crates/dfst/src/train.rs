//! Batched loss/gradient evaluation and training orchestration.
//!
//! The collocation loss is evaluated point by point in three stages:
//!
//! 1. a buffer-based jet forward pass through the coefficient network
//!    (the hot loop: affine layers are plain fused multiply-adds over
//!    contiguous jet-component buffers);
//! 2. the physics head (assembly, extraction, residuals) recorded on a
//!    scalar [`Tape`], whose reverse sweep yields the sensitivity of the
//!    point loss to every output-jet component;
//! 3. a hand-rolled backward pass through the network layers accumulating
//!    parameter gradients.
//!
//! A slower reference path runs the whole computation — network included —
//! on the tape via the same generic jet formulas; tests hold the two routes
//! together, and both are checked against finite differences.
//!
//! Points are processed in fixed-size blocks, in parallel, and block
//! results are reduced sequentially in block order, so losses and gradients
//! are bit-reproducible regardless of thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::{
    assemble_from_jets, extract_euler_dual, extract_mhd_dual, extract_ns_dual,
    masked_active_slots, sym_slot, AssemblyTables, FieldError, TensorSample,
};
use crate::jet::{layout, Jet3, JetLayout, Scalar, Tape, Tv};
use crate::lbfgs::{self, LbfgsOptions, MinimizeResult};
use crate::network::{param_count, CoefficientNetwork};
use crate::physics::{
    deviatoric_sq, energy_residual, field_names, induction_residual, relative_l2,
    sample_validation, viscous_residual, CollocationSet, ProblemKind, ProblemSpec, RelL2,
};

/// Weights of the loss terms. `stress` scales the interior stress residual
/// (zero-deviatoric or viscous), `secondary` the energy or induction
/// residual, `bc` the boundary (or periodicity) penalty, `ic` the
/// initial-condition penalty.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub stress: f64,
    pub secondary: f64,
    pub bc: f64,
    pub ic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { stress: 1.0, secondary: 1.0, bc: 1.0, ic: 1.0 }
    }
}

/// Everything fixed about a training problem: basis tables, network shapes,
/// physical parameters.
#[derive(Debug, Clone)]
pub struct ProblemSetup {
    pub spec: ProblemSpec,
    pub tables: AssemblyTables,
    pub identity_offset: bool,
    pub stress_widths: Vec<usize>,
    pub psi_widths: Option<Vec<usize>>,
    pub rho_floor: f64,
}

impl ProblemSetup {
    /// Build the setup from hidden-layer widths. Input and output widths
    /// come from the problem: space-time dimension in, active coefficient
    /// slots out; the incompressible problems mask the slots whose 2-forms
    /// both contain the time index.
    pub fn new(
        spec: ProblemSpec,
        hidden: &[usize],
        identity_offset: bool,
    ) -> Result<Self, FieldError> {
        let dim = spec.dim();
        let basis = crate::basis::enumerate_two_forms(dim).expect("dim >= 2");
        let active = match spec.kind() {
            ProblemKind::EulerVortex => basis.coefficient_slots(),
            ProblemKind::Beltrami | ProblemKind::Mhd2d => masked_active_slots(&basis),
        };
        let tables = AssemblyTables::new(&basis, &active)?;
        let mut stress_widths = vec![dim];
        stress_widths.extend_from_slice(hidden);
        stress_widths.push(active.len());
        let psi_widths = if spec.kind() == ProblemKind::Mhd2d {
            let mut w = vec![dim];
            w.extend_from_slice(hidden);
            w.push(1);
            Some(w)
        } else {
            None
        };
        Ok(ProblemSetup {
            spec,
            tables,
            identity_offset,
            stress_widths,
            psi_widths,
            rho_floor: crate::field::RHO_FLOOR,
        })
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn stress_param_count(&self) -> usize {
        param_count(&self.stress_widths)
    }

    pub fn n_params(&self) -> usize {
        self.stress_param_count()
            + self.psi_widths.as_ref().map(|w| param_count(w)).unwrap_or(0)
    }

    /// Glorot-initialized flat parameter vector (stress net, then the
    /// potential net seeded one above).
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut params =
            CoefficientNetwork::init(&self.stress_widths, seed).unwrap().params().to_vec();
        if let Some(w) = &self.psi_widths {
            params.extend_from_slice(
                CoefficientNetwork::init(w, seed.wrapping_add(1)).unwrap().params(),
            );
        }
        params
    }

    /// Instantiate the stress network from a flat parameter vector.
    pub fn stress_net(&self, params: &[f64], seed: u64) -> CoefficientNetwork {
        CoefficientNetwork::from_params(
            self.stress_widths.clone(),
            seed,
            params[..self.stress_param_count()].to_vec(),
        )
        .unwrap()
    }
}

// ---------------------------------------------------------------------------
// Buffer-based jet MLP (forward and hand-rolled backward).
// ---------------------------------------------------------------------------

fn jet_from_slice(buf: &[f64], nvars: usize) -> Jet3<f64> {
    let lay = layout(nvars);
    let mut jet = Jet3::constant_of(buf[0], nvars);
    for i in 0..lay.nvars {
        jet.g[i] = buf[1 + i];
    }
    for s in 0..lay.n_hess {
        jet.h[s] = buf[1 + lay.nvars + s];
    }
    for s in 0..lay.n_third {
        jet.t[s] = buf[1 + lay.nvars + lay.n_hess + s];
    }
    jet
}

fn jet_to_slice(jet: &Jet3<f64>, buf: &mut [f64]) {
    let lay = layout(jet.nvars());
    buf[0] = jet.v;
    for i in 0..lay.nvars {
        buf[1 + i] = jet.g[i];
    }
    for s in 0..lay.n_hess {
        buf[1 + lay.nvars + s] = jet.h[s];
    }
    for s in 0..lay.n_third {
        buf[1 + lay.nvars + lay.n_hess + s] = jet.t[s];
    }
}

/// Adjoint of the order-3 tanh composition: accumulates `d loss / d u` into
/// `u_adj` given the pre-activation jet `u` and the adjoint of `y = tanh(u)`.
/// Mirrors the forward Faa di Bruno term by term (scatter form, so repeated
/// indices are handled by construction).
fn tanh_jet_adjoint(lay: &JetLayout, u: &[f64], y_adj: &[f64], u_adj: &mut [f64]) {
    let n = lay.nvars;
    let (gh, hh) = (1, 1 + n);
    let th = 1 + n + lay.n_hess;
    let t = u[0].tanh();
    let p1 = 1.0 - t * t;
    let p2 = -2.0 * t * p1;
    let p3 = -2.0 * (p1 * p1 + t * p2);
    let p4 = -6.0 * p1 * p2 - 2.0 * t * p3;

    u_adj[0] += p1 * y_adj[0];
    for i in 0..n {
        let ya = y_adj[gh + i];
        u_adj[gh + i] += p1 * ya;
        u_adj[0] += p2 * u[gh + i] * ya;
    }
    for s in 0..lay.n_hess {
        let (i, j) = lay.hess_pairs[s];
        let (i, j) = (i as usize, j as usize);
        let ya = y_adj[hh + s];
        let (ui, uj) = (u[gh + i], u[gh + j]);
        u_adj[hh + s] += p1 * ya;
        u_adj[gh + i] += p2 * uj * ya;
        u_adj[gh + j] += p2 * ui * ya;
        u_adj[0] += (p3 * ui * uj + p2 * u[hh + s]) * ya;
    }
    for s in 0..lay.n_third {
        let (i, j, k) = lay.third_triples[s];
        let (i, j, k) = (i as usize, j as usize, k as usize);
        let ya = y_adj[th + s];
        let (ui, uj, uk) = (u[gh + i], u[gh + j], u[gh + k]);
        let (sij, sik, sjk) =
            (lay.hess_index(i, j), lay.hess_index(i, k), lay.hess_index(j, k));
        let (hij, hik, hjk) = (u[hh + sij], u[hh + sik], u[hh + sjk]);
        u_adj[th + s] += p1 * ya;
        u_adj[hh + sij] += p2 * uk * ya;
        u_adj[hh + sik] += p2 * uj * ya;
        u_adj[hh + sjk] += p2 * ui * ya;
        u_adj[gh + i] += (p3 * uj * uk + p2 * hjk) * ya;
        u_adj[gh + j] += (p3 * ui * uk + p2 * hik) * ya;
        u_adj[gh + k] += (p3 * ui * uj + p2 * hij) * ya;
        u_adj[0] +=
            (p4 * ui * uj * uk + p3 * (hij * uk + hik * uj + hjk * ui) + p2 * u[th + s]) * ya;
    }
}

/// Per-thread buffers for one network, batched over a block of
/// evaluation points. Buffers are neuron-major with a fixed point stride,
/// so the affine kernels run over long contiguous spans and each weight is
/// loaded once per block.
#[derive(Debug, Clone)]
pub struct MlpWorkspace {
    widths: Vec<usize>,
    offsets: Vec<(usize, usize)>,
    ncomp: usize,
    nvars: usize,
    /// Maximum batch entries.
    cap: usize,
    /// Entries used by the last forward.
    nb: usize,
    /// act[l]: activations entering layer l, `[neuron][entry][comp]`.
    act: Vec<Vec<f64>>,
    /// pre[l]: pre-activation jets of layer l.
    pre: Vec<Vec<f64>>,
    adj_act: Vec<Vec<f64>>,
    adj_pre: Vec<Vec<f64>>,
}

impl MlpWorkspace {
    pub fn new(widths: &[usize], nvars: usize, cap: usize) -> Self {
        let ncomp = layout(nvars).components();
        let mut offsets = Vec::new();
        let mut off = 0;
        for w in widths.windows(2) {
            offsets.push((off, off + w[0] * w[1]));
            off += w[0] * w[1] + w[1];
        }
        let n_layers = widths.len() - 1;
        let act: Vec<Vec<f64>> =
            (0..=n_layers).map(|l| vec![0.0; widths[l] * cap * ncomp]).collect();
        let pre: Vec<Vec<f64>> =
            (0..n_layers).map(|l| vec![0.0; widths[l + 1] * cap * ncomp]).collect();
        MlpWorkspace {
            widths: widths.to_vec(),
            offsets,
            ncomp,
            nvars,
            cap,
            nb: 0,
            adj_act: act.clone(),
            adj_pre: pre.clone(),
            act,
            pre,
        }
    }

    fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    #[inline]
    fn span(&self, neuron: usize) -> std::ops::Range<usize> {
        let base = neuron * self.cap * self.ncomp;
        base..base + self.nb * self.ncomp
    }

    #[inline]
    fn slot(&self, neuron: usize, entry: usize) -> usize {
        (neuron * self.cap + entry) * self.ncomp
    }

    /// Forward pass over a block of points (each seeds its coordinate jets).
    pub fn forward_batch(&mut self, params: &[f64], xs: &[&[f64]]) {
        assert!(xs.len() <= self.cap);
        self.nb = xs.len();
        let c = self.ncomp;
        let input_span = self.span(self.widths[0] - 1).end;
        self.act[0][..input_span].fill(0.0);
        for (p, x) in xs.iter().enumerate() {
            debug_assert_eq!(x.len(), self.widths[0]);
            for (i, &xi) in x.iter().enumerate() {
                let base = self.slot(i, p);
                self.act[0][base] = xi;
                self.act[0][base + 1 + i] = 1.0;
            }
        }
        let n_layers = self.n_layers();
        for l in 0..n_layers {
            let (w_off, b_off) = self.offsets[l];
            let (w_in, w_out) = (self.widths[l], self.widths[l + 1]);
            let span = self.nb * c;
            let cap_c = self.cap * c;
            let (acts, pres) = (&self.act, &mut self.pre);
            let src = &acts[l];
            let dst = &mut pres[l];
            for o in 0..w_out {
                let out = &mut dst[o * cap_c..o * cap_c + span];
                out.fill(0.0);
                let row = &params[w_off + o * w_in..w_off + (o + 1) * w_in];
                for (i, &w) in row.iter().enumerate() {
                    let a = &src[i * cap_c..i * cap_c + span];
                    for (oc, ac) in out.iter_mut().zip(a) {
                        *oc += w * ac;
                    }
                }
                let b = params[b_off + o];
                for p in 0..self.nb {
                    out[p * c] += b;
                }
            }
            if l + 1 < n_layers {
                for o in 0..w_out {
                    for p in 0..self.nb {
                        let at = self.slot(o, p);
                        let jet = jet_from_slice(&self.pre[l][at..at + c], self.nvars);
                        let y = jet.tanh();
                        jet_to_slice(&y, &mut self.act[l + 1][at..at + c]);
                    }
                }
            } else {
                let (pres, acts) = (&self.pre, &mut self.act);
                acts[n_layers].copy_from_slice(&pres[l]);
            }
        }
    }

    /// Output jet of one entry.
    pub fn output_jet(&self, entry: usize, o: usize) -> Jet3<f64> {
        let at = self.slot(o, entry);
        jet_from_slice(&self.act[self.n_layers()][at..at + self.ncomp], self.nvars)
    }

    /// Zero the output adjoint buffer before per-point scattering.
    pub fn clear_output_adjoint(&mut self) {
        let l = self.n_layers();
        self.adj_act[l].fill(0.0);
    }

    /// Backward pass over the whole block, accumulating parameter
    /// gradients into `grad`.
    pub fn backward_batch(&mut self, params: &[f64], grad: &mut [f64]) {
        let c = self.ncomp;
        let n_layers = self.n_layers();
        let lay = layout(self.nvars);
        let span = self.nb * c;
        let cap_c = self.cap * c;
        for l in (0..n_layers).rev() {
            if l + 1 == n_layers {
                let (adj_acts, adj_pres) = (&self.adj_act, &mut self.adj_pre);
                adj_pres[l].copy_from_slice(&adj_acts[n_layers]);
            } else {
                let w_out = self.widths[l + 1];
                let (pres, adj_acts, adj_pres) = (&self.pre, &self.adj_act, &mut self.adj_pre);
                for o in 0..w_out {
                    for p in 0..self.nb {
                        let at = (o * self.cap + p) * c;
                        let dst = &mut adj_pres[l][at..at + c];
                        dst.fill(0.0);
                        tanh_jet_adjoint(
                            lay,
                            &pres[l][at..at + c],
                            &adj_acts[l + 1][at..at + c],
                            dst,
                        );
                    }
                }
            }
            let (w_off, b_off) = self.offsets[l];
            let (w_in, w_out) = (self.widths[l], self.widths[l + 1]);
            for o in 0..w_out {
                let ap = &self.adj_pre[l][o * cap_c..o * cap_c + span];
                let mut bias = 0.0;
                for p in 0..self.nb {
                    bias += ap[p * c];
                }
                grad[b_off + o] += bias;
                for i in 0..w_in {
                    let a = &self.act[l][i * cap_c..i * cap_c + span];
                    let mut acc = 0.0;
                    for (x, y) in ap.iter().zip(a) {
                        acc += x * y;
                    }
                    grad[w_off + o * w_in + i] += acc;
                }
            }
            if l > 0 {
                let (adj_pres, adj_acts) = (&self.adj_pre, &mut self.adj_act);
                for i in 0..w_in {
                    let dst = &mut adj_acts[l][i * cap_c..i * cap_c + span];
                    dst.fill(0.0);
                    for o in 0..w_out {
                        let w = params[w_off + o * w_in + i];
                        let ap = &adj_pres[l][o * cap_c..o * cap_c + span];
                        for (dc, pc) in dst.iter_mut().zip(ap) {
                            *dc += w * pc;
                        }
                    }
                }
            }
        }
    }
}

/// Generic jet forward through MLP weights given as scalars of the backend
/// (the reference path registers parameters as tape variables here).
pub fn mlp_forward_jet<T: Scalar>(
    widths: &[usize],
    params: &[T],
    x: &[Jet3<T>],
) -> Vec<Jet3<T>> {
    let nvars = x[0].nvars();
    let mut act: Vec<Jet3<T>> = x.to_vec();
    let n_layers = widths.len() - 1;
    let mut off = 0;
    for l in 0..n_layers {
        let (w_in, w_out) = (widths[l], widths[l + 1]);
        let w_off = off;
        let b_off = off + w_in * w_out;
        off += w_in * w_out + w_out;
        let mut next = Vec::with_capacity(w_out);
        for o in 0..w_out {
            let mut acc = Jet3::constant_of(x[0].v.lit(0.0), nvars);
            for (i, a) in act.iter().enumerate() {
                acc = acc + a.mul_s(params[w_off + o * w_in + i]);
            }
            acc.v = acc.v + params[b_off + o];
            next.push(if l + 1 < n_layers { acc.tanh() } else { acc });
        }
        act = next;
    }
    act
}

// ---------------------------------------------------------------------------
// Training points and the per-point head.
// ---------------------------------------------------------------------------

/// What a collocation point contributes to the loss.
#[derive(Debug, Clone)]
pub enum PointTask {
    /// PDE residual terms.
    Interior,
    /// Match extracted fields to targets (boundary penalty weight).
    Boundary(Vec<f64>),
    /// Match extracted fields to targets (initial penalty weight).
    Initial(Vec<f64>),
    /// Match extracted fields at this point and a partner point
    /// (periodicity penalty; weighted like a boundary term).
    Periodic(Vec<f64>),
    /// Regress the assembled tensor onto target upper-triangle values
    /// (Frobenius weighting; used by the approximation smoke test).
    FitTensor(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct TrainPoint {
    pub x: Vec<f64>,
    pub task: PointTask,
    /// 1 / (number of points in this point's term set).
    pub norm: f64,
}

/// Term breakdown: [stress, secondary, bc, ic] weighted sums.
pub type TermSums = [f64; 4];

/// Flatten a collocation set into task points.
pub fn collocation_points(set: &CollocationSet) -> Vec<TrainPoint> {
    let mut points = Vec::new();
    let n_int = set.interior.len().max(1) as f64;
    for x in &set.interior {
        points.push(TrainPoint { x: x.clone(), task: PointTask::Interior, norm: 1.0 / n_int });
    }
    let n_bc = (set.boundary.len() + set.periodic_pairs.len()).max(1) as f64;
    for (x, targets) in &set.boundary {
        points.push(TrainPoint {
            x: x.clone(),
            task: PointTask::Boundary(targets.clone()),
            norm: 1.0 / n_bc,
        });
    }
    for (a, b) in &set.periodic_pairs {
        points.push(TrainPoint {
            x: a.clone(),
            task: PointTask::Periodic(b.clone()),
            norm: 1.0 / n_bc,
        });
    }
    let n_ic = set.initial.len().max(1) as f64;
    for (x, targets) in &set.initial {
        points.push(TrainPoint {
            x: x.clone(),
            task: PointTask::Initial(targets.clone()),
            norm: 1.0 / n_ic,
        });
    }
    points
}

/// Tensor-regression points: fit the assembled field to a target flux
/// tensor (upper triangle per point).
pub fn tensor_fit_points(xs: &[Vec<f64>], targets: &[Vec<f64>]) -> Vec<TrainPoint> {
    let n = xs.len().max(1) as f64;
    xs.iter()
        .zip(targets)
        .map(|(x, t)| TrainPoint {
            x: x.clone(),
            task: PointTask::FitTensor(t.clone()),
            norm: 1.0 / n,
        })
        .collect()
}

/// Predicted fields (values only) in [`field_names`] order, generic over
/// the backend. `psi` must be given for MHD.
fn predicted_fields_t<T: Scalar>(
    setup: &ProblemSetup,
    sample: &TensorSample<T>,
    psi: Option<&Jet3<T>>,
) -> Result<Vec<T>, FieldError> {
    match setup.spec.kind() {
        ProblemKind::EulerVortex => {
            let gamma = match &setup.spec {
                ProblemSpec::EulerVortex(c) => c.gamma,
                _ => unreachable!(),
            };
            let f = extract_euler_dual(sample, gamma, setup.rho_floor)?;
            Ok(vec![f.rho.v, f.velocity[0].v, f.velocity[1].v, f.pressure.v])
        }
        ProblemKind::Beltrami => {
            let f = extract_ns_dual(sample);
            Ok(vec![f.velocity[0].v, f.velocity[1].v, f.velocity[2].v, f.pressure.v])
        }
        ProblemKind::Mhd2d => {
            let f = extract_mhd_dual(sample, psi.expect("psi jet required for MHD"));
            Ok(vec![f.velocity[0].v, f.velocity[1].v, f.b[0].v, f.b[1].v, f.pressure.v])
        }
    }
}

/// Interior residual terms as (stress, secondary) squared magnitudes.
fn interior_terms_t<T: Scalar>(
    setup: &ProblemSetup,
    sample: &TensorSample<T>,
    psi: Option<&Jet3<T>>,
) -> Result<(T, T), FieldError> {
    match &setup.spec {
        ProblemSpec::EulerVortex(c) => {
            let f = extract_euler_dual(sample, c.gamma, setup.rho_floor)?;
            let dev = deviatoric_sq(&f);
            let er = energy_residual(&f);
            Ok((dev, er * er))
        }
        ProblemSpec::Beltrami(c) => {
            let f = extract_ns_dual(sample);
            let r = viscous_residual(&f, c.nu);
            let mut acc = r[0][0] * r[0][0];
            for a in 0..3 {
                for b in 0..3 {
                    if a == 0 && b == 0 {
                        continue;
                    }
                    acc = acc + r[a][b] * r[a][b];
                }
            }
            Ok((acc, acc.lit(0.0)))
        }
        ProblemSpec::Mhd2d(c) => {
            let f = extract_mhd_dual(sample, psi.expect("psi jet required for MHD"));
            // Viscous residual on the 2x2 fluid stress.
            let mut visc: Option<T> = None;
            for a in 0..2 {
                for b in 0..2 {
                    let sym = f.velocity[a].d[1 + b] + f.velocity[b].d[1 + a];
                    let r = f.sigma_dev[a][b].v - sym.scale(c.nu);
                    let sq = r * r;
                    visc = Some(match visc {
                        None => sq,
                        Some(acc) => acc + sq,
                    });
                }
            }
            let ind = induction_residual(&f, c.eta);
            let ind_sq = ind[0] * ind[0] + ind[1] * ind[1];
            Ok((visc.unwrap(), ind_sq))
        }
    }
}

/// The full loss contribution of one point, on any backend, from
/// pre-assembled tensor samples. Returns the per-term (already `norm`- and
/// weight-scaled) values; total = sum.
fn point_terms_t<T: Scalar>(
    setup: &ProblemSetup,
    weights: &LossWeights,
    point: &TrainPoint,
    sample: &TensorSample<T>,
    psi: Option<&Jet3<T>>,
    partner: Option<(&TensorSample<T>, Option<&Jet3<T>>)>,
) -> Result<[Option<T>; 4], FieldError> {
    let mut out: [Option<T>; 4] = [None, None, None, None];
    match &point.task {
        PointTask::Interior => {
            let (stress, secondary) = interior_terms_t(setup, sample, psi)?;
            out[0] = Some(stress.scale(weights.stress * point.norm));
            out[1] = Some(secondary.scale(weights.secondary * point.norm));
        }
        PointTask::Boundary(targets) | PointTask::Initial(targets) => {
            let pred = predicted_fields_t(setup, sample, psi)?;
            debug_assert_eq!(pred.len(), targets.len());
            let mut acc = pred[0].lit(0.0);
            for (p, &t) in pred.iter().zip(targets) {
                let d = *p - p.lit(t);
                acc = acc + d * d;
            }
            let slot = if matches!(point.task, PointTask::Boundary(_)) { 2 } else { 3 };
            let w = if slot == 2 { weights.bc } else { weights.ic };
            out[slot] = Some(acc.scale(w * point.norm));
        }
        PointTask::Periodic(_) => {
            let (sample_b, pp) =
                partner.expect("partner evaluation required for periodic pairs");
            let pred_a = predicted_fields_t(setup, sample, psi)?;
            let pred_b = predicted_fields_t(setup, sample_b, pp)?;
            let mut acc = pred_a[0].lit(0.0);
            for (a, b) in pred_a.iter().zip(&pred_b) {
                let d = *a - *b;
                acc = acc + d * d;
            }
            out[2] = Some(acc.scale(weights.bc * point.norm));
        }
        PointTask::FitTensor(target) => {
            let dim = setup.dim();
            let mut acc = sample.s[0].v.lit(0.0);
            for a in 0..dim {
                for b in a..dim {
                    let w = if a == b { 1.0 } else { 2.0 };
                    let d =
                        sample.s[sym_slot(dim, a, b)].v - acc.lit(target[sym_slot(dim, a, b)]);
                    acc = acc + (d * d).scale(w);
                }
            }
            out[0] = Some(acc.scale(weights.stress * point.norm));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fast evaluator.
// ---------------------------------------------------------------------------

struct ThreadCtx {
    tape: Tape,
    adj: Vec<f64>,
    stress: MlpWorkspace,
    psi: Option<MlpWorkspace>,
}

impl ThreadCtx {
    fn new(setup: &ProblemSetup, cap: usize) -> Self {
        let nvars = setup.dim();
        ThreadCtx {
            tape: Tape::new(),
            adj: Vec::new(),
            stress: MlpWorkspace::new(&setup.stress_widths, nvars, cap),
            psi: setup.psi_widths.as_ref().map(|w| MlpWorkspace::new(w, nvars, cap)),
        }
    }
}

/// Mirror one batch entry's output jets onto the tape; returns the jets
/// and the tape index of every registered component in layout order.
fn register_outputs<'t>(
    tape: &'t Tape,
    ws: &MlpWorkspace,
    entry: usize,
    n_out: usize,
) -> (Vec<Jet3<Tv<'t>>>, Vec<usize>) {
    let lay = layout(ws.nvars);
    let buf = &ws.act[ws.n_layers()];
    let mut indices = Vec::with_capacity(n_out * lay.components());
    let mut jets = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let base = ws.slot(o, entry);
        let v = tape.input(buf[base]);
        indices.push(v.index());
        let mut jet = Jet3::constant_of(v, ws.nvars);
        jet.v = v;
        for i in 0..lay.nvars {
            jet.g[i] = tape.input(buf[base + 1 + i]);
            indices.push(jet.g[i].index());
        }
        for s in 0..lay.n_hess {
            jet.h[s] = tape.input(buf[base + 1 + lay.nvars + s]);
            indices.push(jet.h[s].index());
        }
        for s in 0..lay.n_third {
            jet.t[s] = tape.input(buf[base + 1 + lay.nvars + lay.n_hess + s]);
            indices.push(jet.t[s].index());
        }
        jets.push(jet);
    }
    (jets, indices)
}

/// Accumulate tape adjoints of registered output components into one batch
/// entry's adjoint slots, in the order they were registered.
fn scatter_output_adjoints(
    ws: &mut MlpWorkspace,
    entry: usize,
    n_out: usize,
    indices: &[usize],
    adj: &[f64],
) {
    let lay = layout(ws.nvars);
    let per = lay.components();
    debug_assert_eq!(indices.len(), n_out * per);
    let last = ws.n_layers();
    let mut it = indices.iter();
    for o in 0..n_out {
        let base = ws.slot(o, entry);
        for k in 0..per {
            ws.adj_act[last][base + k] += adj[*it.next().unwrap()];
        }
    }
}

/// An assembled tensor sample registered on the tape: the dual value and
/// tangent components become independent tape inputs, so the (linear)
/// assembly itself stays off the tape and its adjoint is the transposed
/// contraction table.
struct SampleReg {
    /// Tape index of `S_ab` per upper-triangle slot.
    v: Vec<usize>,
    /// Tape index of `∂_e S_ab`, flat `[e * u + ab]`.
    d: Vec<usize>,
}

fn register_sample<'t>(
    tape: &'t Tape,
    sample: &TensorSample<f64>,
) -> (TensorSample<Tv<'t>>, SampleReg) {
    let dim = sample.dim;
    let u = sample.s.len();
    let mut reg = SampleReg { v: Vec::with_capacity(u), d: vec![0; dim * u] };
    let mut entries = Vec::with_capacity(u);
    for (ab, dual) in sample.s.iter().enumerate() {
        let v = tape.input(dual.v);
        reg.v.push(v.index());
        let zero = v.lit(0.0);
        let mut d = [zero; crate::jet::MAX_VARS];
        for (e, de) in d.iter_mut().enumerate().take(dim) {
            let t = tape.input(dual.d[e]);
            reg.d[e * u + ab] = t.index();
            *de = t;
        }
        entries.push(crate::jet::Dual::new(v, d, dim));
    }
    (TensorSample { dim, s: entries }, reg)
}

/// Distribute the adjoints of the registered tensor components back onto
/// one batch entry's output-jet adjoint slots through the transposed
/// assembly tables.
fn scatter_sample_adjoints(
    tables: &AssemblyTables,
    ws: &mut MlpWorkspace,
    entry: usize,
    n_out: usize,
    reg: &SampleReg,
    adj: &[f64],
) {
    let dim = tables.dim();
    let lay = layout(ws.nvars);
    let u = reg.v.len();
    let (hess_base, third_base) = (1 + lay.nvars, 1 + lay.nvars + lay.n_hess);
    let last = ws.n_layers();
    for o in 0..n_out {
        let buf = ws.slot(o, entry);
        let out_adj = &mut ws.adj_act[last];
        for ab in 0..u {
            let av = adj[reg.v[ab]];
            if av != 0.0 {
                for &(slot, w) in &tables.s_terms[o][ab] {
                    out_adj[buf + hess_base + slot] += w * av;
                }
            }
            for e in 0..dim {
                let ad = adj[reg.d[e * u + ab]];
                if ad != 0.0 {
                    for &(slot, w) in &tables.ds_terms[o][e][ab] {
                        out_adj[buf + third_base + slot] += w * ad;
                    }
                }
            }
        }
    }
}

/// The batched loss evaluator.
pub struct Trainer {
    pub setup: ProblemSetup,
    pub weights: LossWeights,
    pub points: Vec<TrainPoint>,
    block_size: usize,
}

impl Trainer {
    pub fn new(setup: ProblemSetup, weights: LossWeights, points: Vec<TrainPoint>) -> Self {
        Trainer { setup, weights, points, block_size: 8 }
    }

    /// Points per batched block (tuning knob; results are independent of it
    /// up to roundoff, and bit-stable for a fixed value).
    pub fn with_block_size(mut self, block_size: usize) -> Self {
        self.block_size = block_size.max(1);
        self
    }

    fn n_stress_outputs(&self) -> usize {
        *self.setup.stress_widths.last().unwrap()
    }

    /// Workspace capacity: periodic pairs contribute two entries per point.
    fn block_capacity(&self) -> usize {
        2 * self.block_size
    }

    /// Loss and gradient at `params`. Returns `f64::INFINITY` when any
    /// point evaluation fails (density underflow, non-finite
    /// intermediates); the line search treats that as a rejected trial.
    pub fn loss_and_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        debug_assert_eq!(params.len(), self.setup.n_params());
        debug_assert_eq!(grad.len(), params.len());
        let blocks: Vec<&[TrainPoint]> = self.points.chunks(self.block_size).collect();
        let results: Vec<Result<(f64, TermSums, Vec<f64>), FieldError>> = blocks
            .par_iter()
            .map_init(
                || ThreadCtx::new(&self.setup, self.block_capacity()),
                |ctx, block| {
                    let mut block_grad = vec![0.0; params.len()];
                    let (loss, terms) = self.eval_block(params, block, ctx, &mut block_grad)?;
                    Ok((loss, terms, block_grad))
                },
            )
            .collect();
        grad.fill(0.0);
        let mut loss = 0.0;
        for r in results {
            match r {
                Ok((l, _, g)) => {
                    loss += l;
                    for (acc, v) in grad.iter_mut().zip(&g) {
                        *acc += v;
                    }
                }
                Err(_) => return f64::INFINITY,
            }
        }
        loss
    }

    /// Loss with per-term breakdown (no parallelism; diagnostics).
    pub fn loss_terms(&self, params: &[f64]) -> Result<(f64, TermSums), FieldError> {
        let mut grad = vec![0.0; params.len()];
        let mut ctx = ThreadCtx::new(&self.setup, self.block_capacity());
        let mut terms = [0.0; 4];
        let mut loss = 0.0;
        for block in self.points.chunks(self.block_size) {
            let (l, t) = self.eval_block(params, block, &mut ctx, &mut grad)?;
            loss += l;
            for (acc, v) in terms.iter_mut().zip(t) {
                *acc += v;
            }
        }
        Ok((loss, terms))
    }

    /// One block: batched network forward, per-point physics heads on the
    /// tape, batched backward.
    fn eval_block(
        &self,
        params: &[f64],
        block: &[TrainPoint],
        ctx: &mut ThreadCtx,
        grad: &mut [f64],
    ) -> Result<(f64, TermSums), FieldError> {
        let setup = &self.setup;
        let n_out = self.n_stress_outputs();
        let p_stress = setup.stress_param_count();
        let (stress_params, psi_params) = params.split_at(p_stress);
        let (stress_grad, psi_grad) = grad.split_at_mut(p_stress);

        // Collect evaluation entries: one per point, a second for the
        // partner of a periodic pair.
        let mut entries: Vec<&[f64]> = Vec::with_capacity(2 * block.len());
        let mut spans: Vec<(usize, Option<usize>)> = Vec::with_capacity(block.len());
        for point in block {
            let e0 = entries.len();
            entries.push(&point.x);
            let e1 = match &point.task {
                PointTask::Periodic(other) => {
                    entries.push(other);
                    Some(entries.len() - 1)
                }
                _ => None,
            };
            spans.push((e0, e1));
        }

        ctx.stress.forward_batch(stress_params, &entries);
        if let Some(ws) = ctx.psi.as_mut() {
            ws.forward_batch(psi_params, &entries);
        }
        ctx.stress.clear_output_adjoint();
        if let Some(ws) = ctx.psi.as_mut() {
            ws.clear_output_adjoint();
        }

        let mut block_loss = 0.0;
        let mut sums = [0.0; 4];
        let mut coeffs: Vec<Jet3<f64>> = Vec::with_capacity(n_out);
        for (point, &(e0, e1)) in block.iter().zip(&spans) {
            coeffs.clear();
            coeffs.extend((0..n_out).map(|o| ctx.stress.output_jet(e0, o)));
            let sample_f = assemble_from_jets(&setup.tables, &coeffs, setup.identity_offset)?;
            let pair_sample = match e1 {
                Some(e) => {
                    let pc: Vec<Jet3<f64>> =
                        (0..n_out).map(|o| ctx.stress.output_jet(e, o)).collect();
                    Some(assemble_from_jets(&setup.tables, &pc, setup.identity_offset)?)
                }
                None => None,
            };

            let tape = &ctx.tape;
            tape.reset();
            let (sample_t, sample_reg) = register_sample(tape, &sample_f);
            let psi_reg = ctx.psi.as_ref().map(|ws| register_outputs(tape, ws, e0, 1));
            let pair_reg = pair_sample.as_ref().map(|s| register_sample(tape, s));
            let pair_psi_reg = match (e1, ctx.psi.as_ref()) {
                (Some(e), Some(ws)) => Some(register_outputs(tape, ws, e, 1)),
                _ => None,
            };

            let psi_jet = psi_reg.as_ref().map(|(j, _)| j[0]);
            let partner = pair_reg
                .as_ref()
                .map(|(s, _)| (s, pair_psi_reg.as_ref().map(|(j, _)| &j[0])));

            let terms =
                point_terms_t(setup, &self.weights, point, &sample_t, psi_jet.as_ref(), partner)?;

            let mut total: Option<Tv> = None;
            for (slot, term) in terms.iter().enumerate() {
                if let Some(t) = term {
                    sums[slot] += t.value();
                    total = Some(match total {
                        None => *t,
                        Some(acc) => acc + *t,
                    });
                }
            }
            let root = total.expect("every task produces at least one term");
            block_loss += root.value();
            tape.backward_into(root, 1.0, &mut ctx.adj).map_err(|_| {
                FieldError::DensityUnderflow { rho: f64::NAN, floor: setup.rho_floor }
            })?;
            let adj = &ctx.adj;

            scatter_sample_adjoints(&setup.tables, &mut ctx.stress, e0, n_out, &sample_reg, adj);
            if let (Some(ws), Some((_, idx))) = (ctx.psi.as_mut(), psi_reg.as_ref()) {
                scatter_output_adjoints(ws, e0, 1, idx, adj);
            }
            if let (Some((_, reg)), Some(e)) = (pair_reg.as_ref(), e1) {
                scatter_sample_adjoints(&setup.tables, &mut ctx.stress, e, n_out, reg, adj);
                if let (Some(ws), Some((_, pidx))) = (ctx.psi.as_mut(), pair_psi_reg.as_ref()) {
                    scatter_output_adjoints(ws, e, 1, pidx, adj);
                }
            }
        }

        ctx.stress.backward_batch(stress_params, stress_grad);
        if let Some(ws) = ctx.psi.as_mut() {
            ws.backward_batch(psi_params, psi_grad);
        }
        Ok((block_loss, sums))
    }

    /// Predicted fields at arbitrary points (plain forward, no tape).
    pub fn predict_fields(
        &self,
        params: &[f64],
        points: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>, FieldError> {
        let setup = &self.setup;
        let nf = field_names(setup.spec.kind()).len();
        let n_out = self.n_stress_outputs();
        let p_stress = setup.stress_param_count();
        let mut series: Vec<Vec<f64>> = vec![Vec::with_capacity(points.len()); nf];
        let cap = self.block_capacity();
        let mut ws = MlpWorkspace::new(&setup.stress_widths, setup.dim(), cap);
        let mut psi_ws =
            setup.psi_widths.as_ref().map(|w| MlpWorkspace::new(w, setup.dim(), cap));
        for chunk in points.chunks(cap) {
            let entries: Vec<&[f64]> = chunk.iter().map(|p| p.as_slice()).collect();
            ws.forward_batch(&params[..p_stress], &entries);
            if let Some(w) = psi_ws.as_mut() {
                w.forward_batch(&params[p_stress..], &entries);
            }
            for e in 0..entries.len() {
                let coeffs: Vec<Jet3<f64>> = (0..n_out).map(|o| ws.output_jet(e, o)).collect();
                let sample =
                    assemble_from_jets(&setup.tables, &coeffs, setup.identity_offset)?;
                let psi_jet = psi_ws.as_ref().map(|w| w.output_jet(e, 0));
                let fields = predicted_fields_t(setup, &sample, psi_jet.as_ref())?;
                for (s, v) in series.iter_mut().zip(fields) {
                    s.push(v);
                }
            }
        }
        Ok(series)
    }

    /// Relative L2 metrics against exact fields on validation points.
    pub fn validate(
        &self,
        params: &[f64],
        points: &[Vec<f64>],
        exact: &[Vec<f64>],
    ) -> Result<RelL2, FieldError> {
        let pred = self.predict_fields(params, points)?;
        Ok(relative_l2(&pred, exact).expect("validation series are well-formed"))
    }
}

/// Reference loss: the whole pipeline (network included) on the tape via
/// the generic jet formulas. Slow; used to pin the fast path in tests and
/// as the recorded-program realization for parameter gradients.
pub struct ReferenceLoss<'a> {
    pub trainer: &'a Trainer,
}

impl crate::jet::LossProgram for ReferenceLoss<'_> {
    fn param_count(&self) -> usize {
        self.trainer.setup.n_params()
    }

    fn build<'t>(&self, tape: &'t Tape, params: &[Tv<'t>]) -> Tv<'t> {
        let setup = &self.trainer.setup;
        let dim = setup.dim();
        let p_stress = setup.stress_param_count();
        let (stress_params, psi_params) = params.split_at(p_stress);
        let forward = |x: &[f64]| -> (Vec<Jet3<Tv<'t>>>, Option<Jet3<Tv<'t>>>) {
            let seeds: Vec<Jet3<Tv>> = x
                .iter()
                .enumerate()
                .map(|(i, &v)| Jet3::variable_of(tape.input(v), i, dim))
                .collect();
            let coeffs = mlp_forward_jet(&setup.stress_widths, stress_params, &seeds);
            let psi = setup
                .psi_widths
                .as_ref()
                .map(|w| mlp_forward_jet(w, psi_params, &seeds)[0]);
            (coeffs, psi)
        };
        let mut total: Option<Tv<'t>> = None;
        for point in &self.trainer.points {
            let (coeffs, psi) = forward(&point.x);
            let sample = assemble_from_jets(&setup.tables, &coeffs, setup.identity_offset)
                .expect("reference assembly failed");
            let pair = match &point.task {
                PointTask::Periodic(other) => {
                    let (pc, pp) = forward(other);
                    let ps = assemble_from_jets(&setup.tables, &pc, setup.identity_offset)
                        .expect("reference assembly failed");
                    Some((ps, pp))
                }
                _ => None,
            };
            let partner = pair.as_ref().map(|(s, p)| (s, p.as_ref()));
            let terms = point_terms_t(
                setup,
                &self.trainer.weights,
                point,
                &sample,
                psi.as_ref(),
                partner,
            )
            .expect("reference loss evaluation failed");
            for term in terms.into_iter().flatten() {
                total = Some(match total {
                    None => term,
                    Some(acc) => acc + term,
                });
            }
        }
        total.expect("nonempty point set")
    }
}

// ---------------------------------------------------------------------------
// Training orchestration.
// ---------------------------------------------------------------------------

/// Early-stopping rule checked every `every` iterations: stop once the
/// validation metric and the loss drop both meet their targets.
#[derive(Debug, Clone, Copy)]
pub struct EarlyStop {
    pub every: usize,
    pub target_mean_rel_l2: f64,
    pub min_loss_drop: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub result: MinimizeResult,
    pub initial_loss: f64,
    pub metrics: RelL2,
}

/// Train on the given points and validate against exact fields.
pub fn train(
    trainer: &Trainer,
    theta0: &[f64],
    opts: &LbfgsOptions,
    validation: &(Vec<Vec<f64>>, Vec<Vec<f64>>),
    early: Option<EarlyStop>,
) -> TrainOutcome {
    let mut grad0 = vec![0.0; theta0.len()];
    let initial_loss = trainer.loss_and_grad(theta0, &mut grad0);
    let objective = |p: &[f64], g: &mut [f64]| trainer.loss_and_grad(p, g);
    let mut cb = early.map(|rule| {
        let (points, exact) = validation;
        move |rec: &lbfgs::IterRecord, theta: &[f64]| -> bool {
            if rec.iter % rule.every != 0 {
                return false;
            }
            if initial_loss / rec.loss.max(1e-300) < rule.min_loss_drop {
                return false;
            }
            match trainer.validate(theta, points, exact) {
                Ok(rel) => rel.mean <= rule.target_mean_rel_l2,
                Err(_) => false,
            }
        }
    });
    let result = lbfgs::minimize(
        objective,
        theta0,
        opts,
        cb.as_mut().map(|c| c as &mut dyn FnMut(&lbfgs::IterRecord, &[f64]) -> bool),
    );
    let metrics = trainer
        .validate(&result.theta, &validation.0, &validation.1)
        .expect("validation after training");
    TrainOutcome { result, initial_loss, metrics }
}
