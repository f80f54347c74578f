//! Divergence-free symmetric tensor (DFST) surrogates.
//!
//! A DFST is a symmetric space-time tensor field `S` whose row-wise
//! space-time divergence vanishes, `∂_t S_b0 + Σ_k ∂_k S_bk = 0`. Fields of
//! this kind encode mass and momentum conservation jointly: the flux tensor
//! of a compressible flow, the stress form of incompressible Navier-Stokes,
//! or the combined fluid/Maxwell stress in MHD are all DFSTs.
//!
//! This crate constructs neural fields that are DFSTs *by construction*:
//! a small tanh network produces scalar coefficient functions, their
//! Hessians are contracted against a fixed basis of Riemann-like
//! `(0,4)`-tensors built from wedge products of coordinate 2-forms, and the
//! antisymmetries of that basis cancel the divergence identically. The
//! remaining modules provide what is needed to train and audit such fields:
//!
//! - [`basis`]: enumeration and classification of the Riemann-like tensor
//!   basis on (n+1)-dimensional space-time.
//! - [`jet`]: order-3 multivariate Taylor jets (forward mode) plus a scalar
//!   tape for reverse-mode parameter gradients.
//! - [`network`]: seeded fully-connected coefficient networks and their
//!   checkpoint format.
//! - [`field`]: assembly of the tensor field, incompressibility masking,
//!   extraction of physical fields, and finite-difference audits.
//! - [`physics`]: benchmark problems (isentropic vortex, Beltrami flow,
//!   2-d MHD), their exact solutions, residuals and losses.
//! - [`lbfgs`]: limited-memory BFGS with a strong-Wolfe line search.
//! - [`oracle`]: a spectral reconstruction oracle that rebuilds a generating
//!   `(0,4)`-tensor for any divergence-free field sampled on a periodic grid.
//! - [`train`]: the batched loss/gradient evaluator and run orchestration.
//! - [`cli`]: the `dfst` command-line entry points (train/eval/check/oracle).

pub mod basis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod field;
pub mod jet;
pub mod lbfgs;
pub mod network;
pub mod oracle;
pub mod physics;
pub mod train;
