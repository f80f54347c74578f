//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The inverse-Hessian action is the standard two-loop recursion over up to
//! `memory` curvature pairs, scaled by `sᵀy / yᵀy`. The line search brackets
//! and zooms with cubic interpolation; trial points with non-finite loss are
//! treated as infinitely bad and the bracket shrinks past them. When the
//! curvature condition cannot be met (common early on stiff collocation
//! losses) the search falls back to plain Armijo backtracking and records
//! the event instead of aborting the run.

use std::collections::VecDeque;
use std::time::Instant;

/// Options for [`minimize`].
#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    /// Number of curvature pairs kept.
    pub memory: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Stop when the relative loss change drops below this.
    pub ftol: f64,
    /// Stop when the max-norm of the gradient drops below this.
    pub gtol: f64,
    /// Maximum function evaluations per line search.
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_iters: 1000,
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            ftol: 1e-12,
            gtol: 1e-10,
            max_line_search: 25,
        }
    }
}

/// One accepted iteration.
#[derive(Debug, Clone, Copy)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradTol,
    FTol,
    MaxIters,
    /// Both Wolfe and the Armijo fallback failed; best iterate returned.
    LineSearchFailed,
    /// The caller-provided callback requested a stop.
    Callback,
    /// The gradient already met `gtol` at the starting point.
    ConvergedAtStart,
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub theta: Vec<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub history: Vec<IterRecord>,
    pub stop: StopReason,
    /// Number of iterations that needed the Armijo fallback.
    pub wolfe_failures: usize,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cubic interpolation of a minimizer between two points with values and
/// slopes, clamped to the interior of the bracket.
fn cubic_interpolate(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64) -> f64 {
    let (lo, hi) = if x1 < x2 { (x1, x2) } else { (x2, x1) };
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    let candidate = if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        }
    } else {
        0.5 * (lo + hi)
    };
    if !candidate.is_finite() {
        return 0.5 * (lo + hi);
    }
    // Keep a safeguarded distance from the bracket ends.
    let margin = 0.1 * (hi - lo);
    candidate.clamp(lo + margin, hi - margin)
}

struct LineEval {
    alpha: f64,
    loss: f64,
    slope: f64,
}

/// Minimize `f` from `theta0`. The objective fills `grad` and returns the
/// loss; non-finite returns are allowed anywhere except at `theta0`.
///
/// `callback` is invoked after every accepted iteration with the record and
/// the current iterate; returning `true` stops the run (used for
/// metric-based early stopping without entangling the optimizer with the
/// problem).
pub fn minimize<F>(
    mut f: F,
    theta0: &[f64],
    opts: &LbfgsOptions,
    mut callback: Option<&mut dyn FnMut(&IterRecord, &[f64]) -> bool>,
) -> MinimizeResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = theta0.len();
    let start = Instant::now();
    let mut theta = theta0.to_vec();
    let mut grad = vec![0.0; n];
    let mut loss = f(&theta, &mut grad);
    assert!(loss.is_finite(), "loss must be finite at the starting point");
    let mut history = Vec::new();
    let mut wolfe_failures = 0usize;

    if inf_norm(&grad) <= opts.gtol {
        return MinimizeResult {
            loss,
            grad_norm: inf_norm(&grad),
            theta,
            iterations: 0,
            history,
            stop: StopReason::ConvergedAtStart,
            wolfe_failures,
        };
    }

    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new(); // (s, y, rho)
    let mut stop = StopReason::MaxIters;
    let mut iterations = 0usize;

    let mut new_grad = vec![0.0; n];
    for iter in 1..=opts.max_iters {
        // Two-loop recursion for d = -H g.
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let dir: Vec<f64> = q.iter().map(|x| -x).collect();
        let mut slope0 = dot(&grad, &dir);
        let dir = if slope0 < 0.0 {
            dir
        } else {
            // Memory produced an ascent direction; restart from steepest descent.
            pairs.clear();
            slope0 = -dot(&grad, &grad);
            grad.iter().map(|x| -x).collect()
        };

        let alpha0 =
            if pairs.is_empty() && iter == 1 { (1.0 / inf_norm(&grad)).min(1.0) } else { 1.0 };

        let mut eval_count = 0usize;
        let mut eval = |alpha: f64, grad_out: &mut Vec<f64>, count: &mut usize| -> LineEval {
            *count += 1;
            let trial: Vec<f64> =
                theta.iter().zip(&dir).map(|(t, d)| t + alpha * d).collect();
            let l = f(&trial, grad_out);
            let l = if l.is_finite() { l } else { f64::INFINITY };
            let slope = if l.is_finite() { dot(grad_out, &dir) } else { f64::INFINITY };
            LineEval { alpha, loss: l, slope }
        };

        // Strong-Wolfe bracketing.
        let mut accepted: Option<LineEval> = None;
        let mut prev = LineEval { alpha: 0.0, loss, slope: slope0 };
        let mut alpha = alpha0;
        let mut bracket: Option<(LineEval, LineEval)> = None;
        for ls_iter in 0..opts.max_line_search {
            let cur = eval(alpha, &mut new_grad, &mut eval_count);
            if cur.loss > loss + opts.c1 * cur.alpha * slope0
                || (ls_iter > 0 && cur.loss >= prev.loss)
            {
                bracket = Some((prev, cur));
                break;
            }
            if cur.slope.abs() <= -opts.c2 * slope0 {
                accepted = Some(cur);
                break;
            }
            if cur.slope >= 0.0 {
                bracket = Some((cur, prev));
                break;
            }
            let next = (alpha * 2.0).min(1e10);
            prev = cur;
            alpha = next;
        }

        // Zoom phase.
        if accepted.is_none() {
            if let Some((mut lo, mut hi)) = bracket {
                while eval_count < opts.max_line_search {
                    let trial = cubic_interpolate(
                        lo.alpha, lo.loss, lo.slope, hi.alpha, hi.loss, hi.slope,
                    );
                    if (hi.alpha - lo.alpha).abs() * inf_norm(&dir) < 1e-16 {
                        break;
                    }
                    let cur = eval(trial, &mut new_grad, &mut eval_count);
                    if cur.loss > loss + opts.c1 * cur.alpha * slope0 || cur.loss >= lo.loss {
                        hi = cur;
                    } else {
                        if cur.slope.abs() <= -opts.c2 * slope0 {
                            accepted = Some(cur);
                            break;
                        }
                        if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                            hi = LineEval { ..lo };
                        }
                        lo = cur;
                    }
                }
            }
        }

        // Armijo backtracking fallback: curvature is often unattainable on
        // stiff losses; a plain decrease keeps the run going.
        if accepted.is_none() {
            wolfe_failures += 1;
            let mut alpha = alpha0;
            for _ in 0..40 {
                let cur = eval(alpha, &mut new_grad, &mut eval_count);
                if cur.loss <= loss + opts.c1 * cur.alpha * slope0 {
                    accepted = Some(cur);
                    break;
                }
                alpha *= 0.5;
            }
        }

        let Some(step) = accepted else {
            stop = StopReason::LineSearchFailed;
            break;
        };

        // The gradient of the accepted point is whatever the last `eval`
        // wrote into `new_grad`: every acceptance path returns right after
        // its evaluation.
        let new_theta: Vec<f64> =
            theta.iter().zip(&dir).map(|(t, d)| t + step.alpha * d).collect();
        let new_loss = step.loss;

        let s: Vec<f64> = new_theta.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            let rho = 1.0 / sy;
            pairs.push_back((s, y, rho));
        }

        let prev_loss = loss;
        theta = new_theta;
        grad.copy_from_slice(&new_grad);
        loss = new_loss;
        iterations = iter;

        let record = IterRecord {
            iter,
            loss,
            grad_norm: inf_norm(&grad),
            step: step.alpha,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        history.push(record);

        if let Some(cb) = callback.as_mut() {
            if cb(&record, &theta) {
                stop = StopReason::Callback;
                break;
            }
        }
        if record.grad_norm <= opts.gtol {
            stop = StopReason::GradTol;
            break;
        }
        let denom = prev_loss.abs().max(loss.abs()).max(1.0);
        if (prev_loss - loss).abs() <= opts.ftol * denom {
            stop = StopReason::FTol;
            break;
        }
    }

    MinimizeResult {
        grad_norm: inf_norm(&grad),
        theta,
        loss,
        iterations,
        history,
        stop,
        wolfe_failures,
    }
}
