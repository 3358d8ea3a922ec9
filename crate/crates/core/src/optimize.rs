//! Adapters over argmin's derivative-free solvers.

use argmin::core::{CostFunction, Error as ArgminError, Executor, State, TerminationReason, TerminationStatus};
use argmin::solver::goldensectionsearch::GoldenSectionSearch;
use argmin::solver::neldermead::NelderMead;

struct Negated<F>(F);

impl<F: Fn(f64) -> f64> CostFunction for Negated<F> {
    type Param = f64;
    type Output = f64;

    fn cost(&self, x: &f64) -> Result<f64, ArgminError> {
        let v = -(self.0)(*x);
        Ok(if v.is_nan() { f64::INFINITY } else { v })
    }
}

/// Maximizes a unimodal `f` on `[a, b]` until the bracket is narrower than
/// about `tol`. Returns `(x, f(x))`; falls back to the midpoint if the solver
/// cannot be set up.
pub(crate) fn golden_section_max<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> (f64, f64) {
    let mid = 0.5 * (a + b);
    let scale = (a.abs() + b.abs()).max(f64::MIN_POSITIVE);
    let run = || -> Result<(f64, f64), ArgminError> {
        let solver = GoldenSectionSearch::new(a, b)?.with_tolerance((tol / scale).max(f64::EPSILON))?;
        let res = Executor::new(Negated(&f), solver)
            .configure(|s| s.param(mid).max_iters(500))
            .run()?;
        let state = res.state();
        Ok((state.get_best_param().copied().unwrap_or(mid), -state.get_best_cost()))
    };
    run().unwrap_or_else(|_| (mid, f(mid)))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NelderMeadOptions {
    pub max_iters: u64,
    /// Stop when the standard deviation of the simplex values falls below this.
    pub sd_tol: f64,
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iters: 5_000,
            sd_tol: 1e-9,
            initial_step: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub converged: bool,
}

struct Objective<F>(F);

impl<F: Fn(&[f64]) -> f64> CostFunction for Objective<F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> Result<f64, ArgminError> {
        let v = (self.0)(x);
        Ok(if v.is_finite() { v } else { f64::INFINITY })
    }
}

/// Minimizes `f` from an axis-aligned initial simplex around `x0`.
/// Non-finite values count as +∞.
pub(crate) fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], opts: NelderMeadOptions) -> NelderMeadResult {
    let mut simplex = vec![x0.to_vec()];
    for i in 0..x0.len() {
        let mut x = x0.to_vec();
        x[i] += opts.initial_step;
        simplex.push(x);
    }
    let fallback = || NelderMeadResult {
        x: x0.to_vec(),
        f: f(x0),
        converged: false,
    };
    let Ok(solver) = NelderMead::new(simplex).with_sd_tolerance(opts.sd_tol) else {
        return fallback();
    };
    match Executor::new(Objective(&f), solver)
        .configure(|s| s.max_iters(opts.max_iters))
        .run()
    {
        Ok(res) => {
            let state = res.state();
            NelderMeadResult {
                x: state.get_best_param().cloned().unwrap_or_else(|| x0.to_vec()),
                f: state.get_best_cost(),
                converged: matches!(
                    state.get_termination_status(),
                    TerminationStatus::Terminated(TerminationReason::SolverConverged)
                ),
            }
        }
        Err(_) => fallback(),
    }
}
