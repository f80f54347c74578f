//! Representation oracle: rebuild a generating `(0,4)`-tensor for any
//! divergence-free symmetric field sampled on a periodic grid.
//!
//! Given grid samples of a symmetric tensor `S`, the oracle solves the
//! componentwise Poisson problem `ΔL = S - mean(S)` spectrally, forms
//!
//! ```text
//! K[a][c][b][d] = δ_ab L_dc - δ_ad L_bc - δ_cb L_da + δ_cd L_ba
//! ```
//!
//! pointwise, and evaluates `Σ_cd ∂_c ∂_d K[a][c][b][d]` by Fourier
//! differentiation. When `S` is divergence-free, `L` is too, the cross
//! terms vanish, and the result reproduces `S - mean` exactly; the
//! subtracted means are constant tensors (divergence-free on their own) and
//! are added back directly. The relative round-trip error therefore
//! certifies that the sampled field lies in the image of the construction.
//!
//! The torus is chosen so the Laplacian solve is exact to roundoff on
//! band-limited inputs and the round-trip error isolates the construction
//! rather than any stencil order.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;
use thiserror::Error;

use crate::field::{sym_len, sym_slot};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("grid sizes must be even, got {0:?}")]
    OddGridSize(Vec<usize>),
    #[error("component count {got} does not match dimension {dim} (expect {expected})")]
    ComponentCount { got: usize, dim: usize, expected: usize },
    #[error("component {0} has {1} samples, grid has {2} points")]
    SampleCount(usize, usize, usize),
    #[error(
        "input is not divergence-free on the grid: relative divergence {rel:.3e} exceeds {tol:.3e}"
    )]
    NotDivergenceFree { rel: f64, tol: f64 },
    #[error("non-finite sample in component {0}")]
    NonFinite(usize),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed grid file: {0}")]
    Format(String),
}

/// A symmetric tensor field sampled on a periodic space-time grid.
///
/// Components are stored for the upper triangle only, row-major over the
/// grid with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicGridField {
    pub dim: usize,
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
    pub comps: Vec<Vec<f64>>,
}

impl PeriodicGridField {
    pub fn zeros(dim: usize, shape: Vec<usize>, spacing: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        PeriodicGridField {
            dim,
            comps: vec![vec![0.0; n]; sym_len(dim)],
            shape,
            spacing,
        }
    }

    pub fn points(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        if self.comps.len() != sym_len(self.dim) {
            return Err(OracleError::ComponentCount {
                got: self.comps.len(),
                dim: self.dim,
                expected: sym_len(self.dim),
            });
        }
        if self.shape.iter().any(|&n| n % 2 != 0) {
            return Err(OracleError::OddGridSize(self.shape.clone()));
        }
        let n = self.points();
        for (c, comp) in self.comps.iter().enumerate() {
            if comp.len() != n {
                return Err(OracleError::SampleCount(c, comp.len(), n));
            }
            if comp.iter().any(|v| !v.is_finite()) {
                return Err(OracleError::NonFinite(c));
            }
        }
        Ok(())
    }

    /// Sample an arbitrary tensor-valued function on the grid. `f` returns
    /// the full `dim x dim` matrix at a point; only the upper triangle is
    /// stored.
    pub fn sample(
        dim: usize,
        shape: &[usize],
        spacing: &[f64],
        f: &dyn Fn(&[f64]) -> Vec<Vec<f64>>,
    ) -> Self {
        let mut grid = Self::zeros(dim, shape.to_vec(), spacing.to_vec());
        let n = grid.points();
        let mut idx = vec![0usize; dim];
        for flat in 0..n {
            let mut rem = flat;
            for ax in (0..dim).rev() {
                idx[ax] = rem % shape[ax];
                rem /= shape[ax];
            }
            let x: Vec<f64> =
                idx.iter().zip(spacing).map(|(&i, &h)| i as f64 * h).collect();
            let s = f(&x);
            for a in 0..dim {
                for b in a..dim {
                    grid.comps[sym_slot(dim, a, b)][flat] = s[a][b];
                }
            }
        }
        grid
    }
}

/// Unnormalized n-dimensional FFT machinery for one grid shape.
struct GridFft {
    shape: Vec<usize>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
    /// Angular wavenumbers per axis in FFT ordering.
    wavenumbers: Vec<Vec<f64>>,
}

impl GridFft {
    fn new(shape: &[usize], spacing: &[f64]) -> Self {
        let mut planner = FftPlanner::new();
        let forward = shape.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inverse = shape.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        let wavenumbers = shape
            .iter()
            .zip(spacing)
            .map(|(&n, &h)| {
                let length = n as f64 * h;
                (0..n)
                    .map(|j| {
                        let freq = if j <= n / 2 { j as isize } else { j as isize - n as isize };
                        2.0 * std::f64::consts::PI * freq as f64 / length
                    })
                    .collect()
            })
            .collect();
        GridFft { shape: shape.to_vec(), forward, inverse, wavenumbers }
    }

    fn transform_axis(&self, data: &mut [Complex<f64>], axis: usize, inverse: bool) {
        let n = self.shape[axis];
        let stride: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let fft = if inverse { &self.inverse[axis] } else { &self.forward[axis] };
        let mut line = vec![Complex::new(0.0, 0.0); n];
        for o in 0..outer {
            for s in 0..stride {
                let base = o * n * stride + s;
                for (j, l) in line.iter_mut().enumerate() {
                    *l = data[base + j * stride];
                }
                fft.process(&mut line);
                for (j, l) in line.iter().enumerate() {
                    data[base + j * stride] = *l;
                }
            }
        }
    }

    fn forward(&self, real: &[f64]) -> Vec<Complex<f64>> {
        let mut data: Vec<Complex<f64>> =
            real.iter().map(|&v| Complex::new(v, 0.0)).collect();
        for axis in 0..self.shape.len() {
            self.transform_axis(&mut data, axis, false);
        }
        data
    }

    fn inverse_real(&self, mut data: Vec<Complex<f64>>) -> Vec<f64> {
        for axis in 0..self.shape.len() {
            self.transform_axis(&mut data, axis, true);
        }
        let scale = 1.0 / self.points() as f64;
        data.iter().map(|c| c.re * scale).collect()
    }

    fn points(&self) -> usize {
        self.shape.iter().product()
    }

    /// Wavenumber vector of a flat spectral index.
    fn k_at(&self, flat: usize) -> Vec<f64> {
        let mut rem = flat;
        let mut k = vec![0.0; self.shape.len()];
        for ax in (0..self.shape.len()).rev() {
            k[ax] = self.wavenumbers[ax][rem % self.shape[ax]];
            rem /= self.shape[ax];
        }
        k
    }
}

/// Solve `Δ L_ab = S_ab - mean(S_ab)` componentwise by spectral inversion.
///
/// Returns the potential grid and the subtracted means (the zero mode has
/// no Green's-function preimage on a torus and is handled as a constant).
pub fn poisson_solve_periodic(
    s: &PeriodicGridField,
) -> Result<(PeriodicGridField, Vec<f64>), OracleError> {
    s.validate()?;
    let fft = GridFft::new(&s.shape, &s.spacing);
    let n = s.points();
    let mut l = PeriodicGridField::zeros(s.dim, s.shape.clone(), s.spacing.clone());
    let mut means = Vec::with_capacity(s.comps.len());
    for (c, comp) in s.comps.iter().enumerate() {
        let mut hat = fft.forward(comp);
        means.push(hat[0].re / n as f64);
        hat[0] = Complex::new(0.0, 0.0);
        for (flat, v) in hat.iter_mut().enumerate().skip(1) {
            let k = fft.k_at(flat);
            let k2: f64 = k.iter().map(|x| x * x).sum();
            *v = if k2 > 0.0 { -*v / k2 } else { Complex::new(0.0, 0.0) };
        }
        l.comps[c] = fft.inverse_real(hat);
    }
    Ok((l, means))
}

/// Dense `(0,4)`-tensor `K` at a point, from a symmetric matrix `L`
/// (upper-triangle row-major, as stored in a grid component vector).
///
/// Slot order matches the assembly convention: entry `[a][c][b][d]` so the
/// antisymmetric pairs are slots (0,1) and (2,3).
pub fn build_k_from_l(l_upper: &[f64], dim: usize) -> Vec<f64> {
    let l = |a: usize, b: usize| l_upper[sym_slot(dim, a, b)];
    let delta = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    let mut k = vec![0.0; dim * dim * dim * dim];
    for a in 0..dim {
        for c in 0..dim {
            for b in 0..dim {
                for d in 0..dim {
                    let v = delta(a, b) * l(d, c) - delta(a, d) * l(b, c)
                        - delta(c, b) * l(d, a)
                        + delta(c, d) * l(b, a);
                    k[((a * dim + c) * dim + b) * dim + d] = v;
                }
            }
        }
    }
    k
}

/// Spectral estimate of the row-wise divergence of the grid field,
/// relative to the field's own norm. Exact (to roundoff) for band-limited
/// grids, which is what makes it a usable acceptance gate at coarse grid
/// spacings where an FD stencil would only see its own truncation error.
pub fn spectral_divergence_rel(s: &PeriodicGridField) -> Result<f64, OracleError> {
    s.validate()?;
    let fft = GridFft::new(&s.shape, &s.spacing);
    let dim = s.dim;
    let hats: Vec<Vec<Complex<f64>>> = s.comps.iter().map(|c| fft.forward(c)).collect();
    let n = s.points();
    let mut div_sq = 0.0;
    for b in 0..dim {
        let mut hat = vec![Complex::new(0.0, 0.0); n];
        for (flat, h) in hat.iter_mut().enumerate() {
            let k = fft.k_at(flat);
            for e in 0..dim {
                let s_be = hats[sym_slot(dim, b, e)][flat];
                *h += Complex::new(0.0, k[e]) * s_be;
            }
        }
        let div = fft.inverse_real(hat);
        div_sq += div.iter().map(|v| v * v).sum::<f64>();
    }
    let mut s_sq = 0.0;
    for a in 0..dim {
        for b in 0..dim {
            let comp = &s.comps[sym_slot(dim, a, b)];
            s_sq += comp.iter().map(|v| v * v).sum::<f64>();
        }
    }
    if s_sq == 0.0 {
        return Ok(0.0);
    }
    Ok((div_sq / s_sq).sqrt())
}

/// Report of a representation round trip.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    /// `||Φ(K) - S||_2 / ||S||_2` over the grid (Frobenius weighting).
    pub rel_error: f64,
    /// Relative spectral divergence of the input (the acceptance gate value).
    pub divergence_rel: f64,
    /// Subtracted per-component means.
    pub means: Vec<f64>,
}

/// Divergence tolerance above which inputs are rejected.
pub const DIVERGENCE_GATE: f64 = 1e-6;

/// Full oracle: gate on divergence-freeness, solve for `L`, build `K`
/// fieldwise, evaluate `Φ(K)` spectrally, add the means back and return the
/// relative reconstruction error.
pub fn verify_representation(s: &PeriodicGridField) -> Result<OracleReport, OracleError> {
    s.validate()?;
    let divergence_rel = spectral_divergence_rel(s)?;
    if divergence_rel > DIVERGENCE_GATE {
        return Err(OracleError::NotDivergenceFree { rel: divergence_rel, tol: DIVERGENCE_GATE });
    }
    let (l, means) = poisson_solve_periodic(s)?;
    let dim = s.dim;
    let n = s.points();
    let fft = GridFft::new(&s.shape, &s.spacing);

    // K componentwise over the grid (a,c,b,d slots), then one spectral
    // second-derivative contraction per output component.
    let quad = |a: usize, c: usize, b: usize, d: usize| ((a * dim + c) * dim + b) * dim + d;
    let mut k_grids: Vec<Vec<f64>> = vec![vec![0.0; n]; dim * dim * dim * dim];
    let mut l_point = vec![0.0; sym_len(dim)];
    for flat in 0..n {
        for (slot, lp) in l_point.iter_mut().enumerate() {
            *lp = l.comps[slot][flat];
        }
        let k = build_k_from_l(&l_point, dim);
        for (q, grid) in k_grids.iter_mut().enumerate() {
            grid[flat] = k[q];
        }
    }
    let k_hats: Vec<Vec<Complex<f64>>> = k_grids.iter().map(|g| fft.forward(g)).collect();

    let mut num = 0.0;
    let mut den = 0.0;
    for a in 0..dim {
        for b in a..dim {
            let mut hat = vec![Complex::new(0.0, 0.0); n];
            for (flat, h) in hat.iter_mut().enumerate() {
                let k = fft.k_at(flat);
                for c in 0..dim {
                    for d in 0..dim {
                        *h += k_hats[quad(a, c, b, d)][flat] * (-k[c] * k[d]);
                    }
                }
            }
            let phi = fft.inverse_real(hat);
            let target = &s.comps[sym_slot(dim, a, b)];
            let mean = means[sym_slot(dim, a, b)];
            let weight = if a == b { 1.0 } else { 2.0 };
            for (p, t) in phi.iter().zip(target) {
                let rec = p + mean;
                num += weight * (rec - t) * (rec - t);
                den += weight * t * t;
            }
        }
    }
    let rel_error = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
    Ok(OracleReport { rel_error, divergence_rel, means })
}

// ---------------------------------------------------------------------------
// Grid container I/O: binary (shape header + row-major doubles) and CSV.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"DFSTGRD1";

pub fn write_grid_binary(grid: &PeriodicGridField, path: &Path) -> Result<(), OracleError> {
    grid.validate()?;
    let io_err = |e: std::io::Error| OracleError::Io { path: path.display().to_string(), source: e };
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(grid.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.comps.len() as u32).to_le_bytes());
    for &n in &grid.shape {
        buf.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for &h in &grid.spacing {
        buf.extend_from_slice(&h.to_le_bytes());
    }
    for comp in &grid.comps {
        for v in comp {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)
}

pub fn read_grid_binary(path: &Path) -> Result<PeriodicGridField, OracleError> {
    let io_err = |e: std::io::Error| OracleError::Io { path: path.display().to_string(), source: e };
    let mut bytes = Vec::new();
    std::fs::File::open(path).map_err(io_err)?.read_to_end(&mut bytes).map_err(io_err)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], OracleError> {
        if *off + n > bytes.len() {
            return Err(OracleError::Format("truncated grid file".into()));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 8)? != MAGIC {
        return Err(OracleError::Format("bad magic".into()));
    }
    let dim = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let ncomp = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    if dim == 0 || dim > 4 || ncomp != sym_len(dim) {
        return Err(OracleError::Format(format!("bad header: dim={dim}, ncomp={ncomp}")));
    }
    let mut shape = Vec::with_capacity(dim);
    for _ in 0..dim {
        shape.push(u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize);
    }
    let mut spacing = Vec::with_capacity(dim);
    for _ in 0..dim {
        spacing.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
    }
    let n: usize = shape.iter().product();
    let mut comps = Vec::with_capacity(ncomp);
    for _ in 0..ncomp {
        let mut comp = Vec::with_capacity(n);
        for _ in 0..n {
            comp.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
        }
        comps.push(comp);
    }
    if off != bytes.len() {
        return Err(OracleError::Format("trailing bytes".into()));
    }
    let grid = PeriodicGridField { dim, shape, spacing, comps };
    grid.validate()?;
    Ok(grid)
}

/// CSV dump for small grids: one row per point, coordinates then the upper
/// triangle components.
pub fn write_grid_csv(grid: &PeriodicGridField, path: &Path) -> Result<(), OracleError> {
    grid.validate()?;
    let io_err = |e: std::io::Error| OracleError::Io { path: path.display().to_string(), source: e };
    let mut out = String::new();
    let coord_names = ["t", "x", "y", "z"];
    let mut header: Vec<String> =
        (0..grid.dim).map(|i| coord_names[i].to_string()).collect();
    for a in 0..grid.dim {
        for b in a..grid.dim {
            header.push(format!("s{a}{b}"));
        }
    }
    out.push_str(&header.join(","));
    out.push('\n');
    let n = grid.points();
    let mut idx = vec![0usize; grid.dim];
    for flat in 0..n {
        let mut rem = flat;
        for ax in (0..grid.dim).rev() {
            idx[ax] = rem % grid.shape[ax];
            rem /= grid.shape[ax];
        }
        let mut row: Vec<String> = idx
            .iter()
            .zip(&grid.spacing)
            .map(|(&i, &h)| format!("{}", i as f64 * h))
            .collect();
        for comp in &grid.comps {
            row.push(format!("{}", comp[flat]));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err)
}
