//! Phase-insensitive detector models and coherent-probe detector tomography.
//!
//! A detector POVM is diagonal in the Fock basis: `θ[k][n]` is the
//! probability that `k` incident photons produce outcome `n`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::TwoModeState;
use crate::metrology::OutcomeDistribution;

const COMPLETENESS_TOL: f64 = 1e-9;
/// POVM entries at or below this with an outward gradient are sent to zero.
const ACTIVE_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PovmFile", into = "PovmFile")]
pub struct DetectorPovm {
    outcomes: Vec<String>,
    theta: Vec<Vec<f64>>,
}

/// On-disk layout: `{ "k_max": int, "outcomes": [names], "theta": [[row per k]] }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PovmFile {
    k_max: usize,
    outcomes: Vec<String>,
    theta: Vec<Vec<f64>>,
}

impl TryFrom<PovmFile> for DetectorPovm {
    type Error = Error;

    fn try_from(f: PovmFile) -> Result<Self> {
        if f.theta.len() != f.k_max + 1 {
            return Err(Error::InvalidPovm(format!(
                "k_max = {} but theta has {} rows",
                f.k_max,
                f.theta.len()
            )));
        }
        DetectorPovm::new(f.outcomes, f.theta)
    }
}

impl From<DetectorPovm> for PovmFile {
    fn from(p: DetectorPovm) -> Self {
        PovmFile {
            k_max: p.k_max(),
            outcomes: p.outcomes,
            theta: p.theta,
        }
    }
}

impl DetectorPovm {
    pub fn new(outcomes: Vec<String>, theta: Vec<Vec<f64>>) -> Result<Self> {
        if theta.is_empty() || outcomes.is_empty() {
            return Err(Error::InvalidPovm("empty POVM".into()));
        }
        for (k, row) in theta.iter().enumerate() {
            if row.len() != outcomes.len() {
                return Err(Error::InvalidPovm(format!(
                    "row {k} has {} entries for {} outcomes",
                    row.len(),
                    outcomes.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !(-1e-12..=1.0 + 1e-12).contains(*v)) {
                return Err(Error::InvalidPovm(format!("row {k} has entry {v} outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > COMPLETENESS_TOL {
                return Err(Error::InvalidPovm(format!("row {k} sums to {sum}")));
            }
        }
        let theta = theta
            .into_iter()
            .map(|row| row.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
            .collect();
        Ok(Self { outcomes, theta })
    }

    /// Ideal photon counting up to `n_max`; outcome `n_max` collects every
    /// `k ≥ n_max`.
    pub fn ideal_pnr(n_max: usize, k_max: usize) -> Result<Self> {
        if n_max > k_max {
            return Err(Error::InvalidPovm(format!("n_max {n_max} exceeds k_max {k_max}")));
        }
        let theta = (0..=k_max)
            .map(|k| {
                let mut row = vec![0.0; n_max + 1];
                row[k.min(n_max)] = 1.0;
                row
            })
            .collect();
        Self::new(pnr_labels(n_max), theta)
    }

    /// Ideal photon counting behind a pure loss of transmissivity `eta`:
    /// `θ_k^(n) = C(k,n) ηⁿ (1-η)^{k-n}`, saturating at `n_max`.
    pub fn efficiency(eta: f64, n_max: usize, k_max: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::param("eta", eta, "efficiency must lie in [0, 1]"));
        }
        if n_max > k_max {
            return Err(Error::InvalidPovm(format!("n_max {n_max} exceeds k_max {k_max}")));
        }
        let table = crate::optics::binomial_table(eta, k_max + 1);
        let theta = table
            .iter()
            .map(|probs| {
                let mut row = vec![0.0; n_max + 1];
                for (n, p) in probs.iter().enumerate() {
                    row[n.min(n_max)] += p;
                }
                row
            })
            .collect();
        Self::new(pnr_labels(n_max), theta)
    }

    /// Coarse-grains to a click detector: "no-click" is outcome 0, "click" is
    /// every other outcome.
    pub fn click_from(pnr: &DetectorPovm) -> Self {
        let theta = pnr
            .theta
            .iter()
            .map(|row| {
                let none = row[0];
                vec![none, row[1..].iter().sum()]
            })
            .collect();
        Self {
            outcomes: vec!["no-click".into(), "click".into()],
            theta,
        }
    }

    pub fn k_max(&self) -> usize {
        self.theta.len() - 1
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcomes.len()
    }

    pub fn outcomes(&self) -> &[String] {
        &self.outcomes
    }

    /// `θ_k^(n)`.
    pub fn theta(&self, k: usize, n: usize) -> f64 {
        self.theta[k][n]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.theta
    }

    pub fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.theta.len(), self.n_outcomes(), |k, n| self.theta[k][n])
    }

    /// Largest element-wise difference against a POVM of the same shape.
    pub fn max_abs_diff(&self, other: &DetectorPovm) -> Result<f64> {
        if self.theta.len() != other.theta.len() || self.n_outcomes() != other.n_outcomes() {
            return Err(Error::DimensionMismatch {
                expected: self.theta.len() * self.n_outcomes(),
                found: other.theta.len() * other.n_outcomes(),
            });
        }
        Ok(self
            .theta
            .iter()
            .flatten()
            .zip(other.theta.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn pnr_labels(n_max: usize) -> Vec<String> {
    (0..=n_max)
        .map(|n| {
            if n == n_max && n_max > 0 {
                format!(">={n}")
            } else {
                n.to_string()
            }
        })
        .collect()
}

/// Coherent-state probes, given by their mean photon numbers `|α_m|²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub amplitudes: Vec<f64>,
    pub shots: Vec<u64>,
}

impl ProbeSet {
    pub fn new(amplitudes: Vec<f64>, shots: Vec<u64>) -> Result<Self> {
        if amplitudes.len() != shots.len() {
            return Err(Error::DimensionMismatch {
                expected: amplitudes.len(),
                found: shots.len(),
            });
        }
        if let Some(&a) = amplitudes.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(Error::param("alpha_sq", a, "probe mean photon number must be >= 0"));
        }
        Ok(Self { amplitudes, shots })
    }

    pub fn uniform(amplitudes: Vec<f64>, shots_per_probe: u64) -> Result<Self> {
        let shots = vec![shots_per_probe; amplitudes.len()];
        Self::new(amplitudes, shots)
    }

    /// `count` mean photon numbers spaced geometrically from `lo` to `hi`.
    pub fn geometric_ladder(lo: f64, hi: f64, count: usize) -> Vec<f64> {
        if count == 1 {
            return vec![lo];
        }
        let ratio = (hi / lo).powf(1.0 / (count - 1) as f64);
        (0..count).map(|i| lo * ratio.powi(i as i32)).collect()
    }

    /// Default synthetic ladder: 15 probes from 0.1 to 12.8 photons.
    pub fn default_ladder() -> Vec<f64> {
        Self::geometric_ladder(0.1, 12.8, 15)
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    pub fn distinct_amplitudes(&self) -> usize {
        let mut a = self.amplitudes.clone();
        a.sort_by(f64::total_cmp);
        a.dedup();
        a.len()
    }
}

/// Empirical outcome frequencies, one row per probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    rows: Vec<Vec<f64>>,
}

impl ResponseMatrix {
    /// Rows must be non-negative and sum to at most one. Measured data sums to
    /// one; exact model predictions on a truncated space may sum to less.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || width == 0 {
            return Err(Error::InvalidData("empty response matrix".into()));
        }
        for (m, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::InvalidData(format!("row {m} has {} outcomes", row.len())));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidData(format!("row {m} has an entry outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if sum > 1.0 + COMPLETENESS_TOL {
                return Err(Error::InvalidData(format!("row {m} sums to {sum} > 1")));
            }
        }
        Ok(Self { rows })
    }

    pub fn from_counts(counts: &[Vec<u64>]) -> Result<Self> {
        let rows = counts
            .iter()
            .enumerate()
            .map(|(m, row)| {
                let total: u64 = row.iter().sum();
                if total == 0 {
                    return Err(Error::InvalidData(format!("probe {m} has no recorded shots")));
                }
                Ok(row.iter().map(|&c| c as f64 / total as f64).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    pub fn n_probes(&self) -> usize {
        self.rows.len()
    }

    pub fn n_outcomes(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Poisson photon-number distributions of the probes:
/// `C[m][k] = |α_m|^{2k} e^{-|α_m|²} / k!` for `k ≤ k_max`. Rows are not
/// renormalized; their deficit is the Poisson tail above `k_max`.
pub fn coherent_probe_matrix(probes: &ProbeSet, k_max: usize) -> Result<DMatrix<f64>> {
    if let Some(&a) = probes.amplitudes.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(Error::param("alpha_sq", a, "probe mean photon number must be >= 0"));
    }
    Ok(DMatrix::from_fn(probes.len(), k_max + 1, |m, k| {
        poisson_pmf(probes.amplitudes[m], k)
    }))
}

pub(crate) fn poisson_pmf(mean: f64, k: usize) -> f64 {
    if mean == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    let ln_fact: f64 = (1..=k).map(|i| (i as f64).ln()).sum();
    (k as f64 * mean.ln() - mean - ln_fact).exp()
}

/// `1 - Σ_k C[m][k]` per probe.
pub fn probe_tail_deficits(c: &DMatrix<f64>) -> Vec<f64> {
    c.row_iter().map(|r| (1.0 - r.sum()).max(0.0)).collect()
}

/// Exact model response `R = C Π` (rows carry the same tail deficit as `C`).
pub fn model_response(c: &DMatrix<f64>, povm: &DetectorPovm) -> Result<ResponseMatrix> {
    if c.ncols() != povm.k_max() + 1 {
        return Err(Error::DimensionMismatch {
            expected: povm.k_max() + 1,
            found: c.ncols(),
        });
    }
    let r = c * povm.as_matrix();
    ResponseMatrix::new(r.row_iter().map(|row| row.iter().copied().collect()).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TomographyOptions {
    pub max_iterations: usize,
    /// Expectation-maximization sweeps before switching to Newton steps.
    pub em_warmup: usize,
    /// Stop once the Newton decrement (expected log-likelihood gain) falls below this.
    pub tolerance: f64,
    /// Proceed even when `C` is numerically rank deficient.
    pub allow_rank_deficient: bool,
    /// Relative singular-value threshold for the rank test.
    pub rank_tolerance: f64,
    /// Probe tail deficits above this are reported as warnings.
    pub tail_warning: f64,
}

impl Default for TomographyOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100_000,
            em_warmup: 200,
            tolerance: 1e-10,
            allow_rank_deficient: false,
            rank_tolerance: 1e-13,
            tail_warning: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TomographyDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood: f64,
    /// Norm of the projected (KKT) gradient at the returned iterate, per shot.
    pub final_gradient_norm: f64,
    pub rank: usize,
    pub condition_number: f64,
    pub tail_deficits: Vec<f64>,
    pub warnings: Vec<String>,
    /// Log-likelihood after every iteration, starting from the initial guess.
    pub log_likelihood_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TomographyResult {
    pub povm: DetectorPovm,
    pub diagnostics: TomographyDiagnostics,
}

fn singular_summary(c: &DMatrix<f64>, rel_tol: f64) -> (usize, f64) {
    let sv = c.clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let rank = sv.iter().filter(|&&s| s > rel_tol * max).count();
    let cond = if rank < c.ncols() || min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    };
    (rank, cond)
}

/// Maximum-likelihood POVM from coherent-probe data.
///
/// Maximizes `Σ_{m,n} N_m R[m][n] ln(Σ_k C[m][k] θ_k^(n))` over row-stochastic
/// `θ`. A short expectation-maximization warm-up (multiplicative reweighting
/// by the posterior photon-number share, then per-row normalization) is
/// followed by active-set Newton steps on the row-sum constrained problem.
/// Every accepted iterate is feasible and no step lowers the log-likelihood.
pub fn tomography_mle(
    response: &ResponseMatrix,
    c: &DMatrix<f64>,
    shots: &[u64],
    options: &TomographyOptions,
) -> Result<TomographyResult> {
    let n_probes = response.n_probes();
    let n_out = response.n_outcomes();
    let k_dim = c.ncols();
    if c.nrows() != n_probes {
        return Err(Error::DimensionMismatch {
            expected: n_probes,
            found: c.nrows(),
        });
    }
    if shots.len() != n_probes {
        return Err(Error::DimensionMismatch {
            expected: n_probes,
            found: shots.len(),
        });
    }

    let mut warnings = Vec::new();
    let (rank, condition_number) = singular_summary(c, options.rank_tolerance);
    if rank < k_dim {
        let msg = format!("probe matrix has rank {rank} for {k_dim} photon numbers ({n_probes} probes)");
        if !options.allow_rank_deficient {
            return Err(Error::Identifiability(msg));
        }
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let tail_deficits = probe_tail_deficits(c);
    for (m, t) in tail_deficits.iter().enumerate() {
        if *t > options.tail_warning {
            warnings.push(format!("probe {m} loses {t:.3e} of its photon-number distribution above k_max"));
        }
    }

    let problem = MleProblem::new(response, c, shots);
    let mut theta = vec![vec![1.0 / n_out as f64; n_out]; k_dim];
    let mut pred = problem.predict(&theta);
    let mut ll = problem.relative_ll(&pred);
    let mut trace = vec![ll];
    let mut iterations = 0;

    // EM warm-up
    while iterations < options.em_warmup.min(options.max_iterations) {
        let g = problem.score(&pred);
        let mut next = theta.clone();
        for (row, (t, gk)) in next.iter_mut().zip(theta.iter().zip(&g)) {
            let weighted: Vec<f64> = t.iter().zip(gk).map(|(a, b)| a * b).collect();
            let norm: f64 = weighted.iter().sum();
            if norm > 0.0 {
                *row = weighted.iter().map(|w| w / norm).collect();
            }
        }
        let next_pred = problem.predict(&next);
        let next_ll = problem.relative_ll(&next_pred);
        if next_ll < ll {
            break;
        }
        iterations += 1;
        let gain = next_ll - ll;
        theta = next;
        pred = next_pred;
        ll = next_ll;
        trace.push(ll);
        if gain < options.tolerance {
            break;
        }
    }

    // projected Newton with an ε-active set
    let mut converged = false;
    while iterations < options.max_iterations {
        let g = problem.score(&pred);
        let mut free = vec![vec![true; n_out]; k_dim];
        let mut pushed = vec![0.0; k_dim];
        for k in 0..k_dim {
            let lambda: f64 = (0..n_out).map(|n| theta[k][n] * g[k][n]).sum();
            for n in 0..n_out {
                if theta[k][n] <= ACTIVE_EPS && g[k][n] <= lambda * (1.0 + 1e-9) {
                    free[k][n] = false;
                    pushed[k] += theta[k][n];
                }
            }
        }
        let Some((dir, decrement)) = problem.newton_direction(&pred, &g, &free, &pushed) else {
            warnings.push("singular Newton system".into());
            break;
        };
        let pending: f64 = pushed.iter().sum();
        if decrement < options.tolerance && pending == 0.0 {
            converged = true;
            break;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<Vec<f64>> = (0..k_dim)
                .map(|k| {
                    let row: Vec<f64> = (0..n_out)
                        .map(|n| {
                            if free[k][n] {
                                (theta[k][n] + t * dir[k][n]).max(0.0)
                            } else {
                                (1.0 - t) * theta[k][n]
                            }
                        })
                        .collect();
                    let s: f64 = row.iter().sum();
                    row.into_iter().map(|v| v / s).collect()
                })
                .collect();
            let cand_pred = problem.predict(&cand);
            let cand_ll = problem.relative_ll(&cand_pred);
            if cand_ll >= ll {
                accepted = Some((cand, cand_pred, cand_ll));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, cand_pred, cand_ll)) = accepted else {
            // no ascent left at machine precision
            converged = decrement < options.tolerance.sqrt();
            break;
        };
        iterations += 1;
        let unchanged = cand == theta;
        theta = cand;
        pred = cand_pred;
        ll = cand_ll;
        trace.push(ll);
        if unchanged {
            converged = decrement < options.tolerance.sqrt();
            break;
        }
    }

    for row in theta.iter_mut() {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let g = problem.score(&pred);
    let total_shots = problem.total_weight.max(1.0);
    let mut kkt = 0.0;
    for k in 0..k_dim {
        let lambda: f64 = (0..n_out).map(|n| theta[k][n] * g[k][n]).sum();
        for n in 0..n_out {
            let r = if theta[k][n] > 0.0 {
                g[k][n] - lambda
            } else {
                (g[k][n] - lambda).max(0.0)
            } / total_shots;
            kkt += r * r;
        }
    }
    if !converged {
        let msg = format!("no convergence after {iterations} iterations");
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let outcomes = if n_out >= 2 {
        pnr_labels(n_out - 1)
    } else {
        vec!["0".into()]
    };
    let povm = DetectorPovm::new(outcomes, theta)?;
    let offset = problem.saturated_ll;
    Ok(TomographyResult {
        povm,
        diagnostics: TomographyDiagnostics {
            iterations,
            converged,
            log_likelihood: offset + ll,
            final_gradient_norm: kkt.sqrt(),
            rank,
            condition_number,
            tail_deficits,
            warnings,
            log_likelihood_trace: trace.into_iter().map(|v| offset + v).collect(),
        },
    })
}

struct MleProblem<'a> {
    c: &'a DMatrix<f64>,
    /// `N_m R[m][n]`
    weights: Vec<Vec<f64>>,
    /// `R[m][n]`, the reference for the likelihood ratio
    freqs: &'a [Vec<f64>],
    saturated_ll: f64,
    total_weight: f64,
}

impl<'a> MleProblem<'a> {
    fn new(response: &'a ResponseMatrix, c: &'a DMatrix<f64>, shots: &[u64]) -> Self {
        let weights: Vec<Vec<f64>> = response
            .rows()
            .iter()
            .zip(shots)
            .map(|(row, &s)| row.iter().map(|r| r * s as f64).collect())
            .collect();
        let mut saturated_ll = 0.0;
        for (w, r) in weights.iter().zip(response.rows()) {
            for (&w, &r) in w.iter().zip(r) {
                if w > 0.0 {
                    saturated_ll += w * r.ln();
                }
            }
        }
        let total_weight = weights.iter().flatten().sum();
        Self {
            c,
            weights,
            freqs: response.rows(),
            saturated_ll,
            total_weight,
        }
    }

    fn predict(&self, theta: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n_out = theta[0].len();
        (0..self.c.nrows())
            .map(|m| {
                (0..n_out)
                    .map(|n| (0..self.c.ncols()).map(|k| self.c[(m, k)] * theta[k][n]).sum())
                    .collect()
            })
            .collect()
    }

    /// Log-likelihood minus its saturated value; keeps full precision near the
    /// optimum where the raw sum would lose it to cancellation.
    fn relative_ll(&self, pred: &[Vec<f64>]) -> f64 {
        let mut ll = 0.0;
        for ((w, p), r) in self.weights.iter().zip(pred).zip(self.freqs) {
            for ((&w, &p), &r) in w.iter().zip(p).zip(r) {
                if w > 0.0 {
                    ll += w * (p / r).ln();
                }
            }
        }
        ll
    }

    /// `g[k][n] = ∂LL/∂θ_k^(n)`
    fn score(&self, pred: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n_out = pred[0].len();
        let k_dim = self.c.ncols();
        let mut g = vec![vec![0.0; n_out]; k_dim];
        for (m, (w, p)) in self.weights.iter().zip(pred).enumerate() {
            for n in 0..n_out {
                if w[n] <= 0.0 {
                    continue;
                }
                let ratio = w[n] / p[n];
                for (k, gk) in g.iter_mut().enumerate() {
                    gk[n] += ratio * self.c[(m, k)];
                }
            }
        }
        g
    }

    /// Newton direction on the free entries subject to `Σ_n dθ_k^(n) = pushed_k`,
    /// with the Newton decrement. Columns decouple except through the row
    /// constraints, which are solved by a Schur complement.
    fn newton_direction(
        &self,
        pred: &[Vec<f64>],
        g: &[Vec<f64>],
        free: &[Vec<bool>],
        pushed: &[f64],
    ) -> Option<(Vec<Vec<f64>>, f64)> {
        let k_dim = self.c.ncols();
        let n_out = pred[0].len();
        let mut schur = DMatrix::<f64>::zeros(k_dim, k_dim);
        let mut rhs = nalgebra::DVector::<f64>::zeros(k_dim);
        let mut inverses = Vec::with_capacity(n_out);
        for n in 0..n_out {
            let idx: Vec<usize> = (0..k_dim).filter(|&k| free[k][n]).collect();
            if idx.is_empty() {
                inverses.push((idx, DMatrix::zeros(0, 0)));
                continue;
            }
            let mut a = DMatrix::<f64>::zeros(idx.len(), idx.len());
            for (m, (w, p)) in self.weights.iter().zip(pred).enumerate() {
                if w[n] <= 0.0 {
                    continue;
                }
                let s = w[n] / (p[n] * p[n]);
                for (i, &ki) in idx.iter().enumerate() {
                    let ci = self.c[(m, ki)] * s;
                    if ci == 0.0 {
                        continue;
                    }
                    for (j, &kj) in idx.iter().enumerate() {
                        a[(i, j)] += ci * self.c[(m, kj)];
                    }
                }
            }
            let scale = a.diagonal().max().max(f64::MIN_POSITIVE);
            for i in 0..idx.len() {
                a[(i, i)] += 1e-14 * scale;
            }
            let inv = a.cholesky()?.inverse();
            for (i, &ki) in idx.iter().enumerate() {
                for (j, &kj) in idx.iter().enumerate() {
                    schur[(ki, kj)] += inv[(i, j)];
                    rhs[ki] += inv[(i, j)] * g[kj][n];
                }
            }
            inverses.push((idx, inv));
        }
        for k in 0..k_dim {
            // free entries of row k must absorb the mass pushed out of its active entries
            rhs[k] -= pushed[k];
            if schur[(k, k)] == 0.0 {
                schur[(k, k)] = 1.0;
            }
        }
        let nu = schur.lu().solve(&rhs)?;
        let mut dir = vec![vec![0.0; n_out]; k_dim];
        let mut decrement = 0.0;
        for (n, (idx, inv)) in inverses.iter().enumerate() {
            for (i, &ki) in idx.iter().enumerate() {
                let d: f64 = idx
                    .iter()
                    .enumerate()
                    .map(|(j, &kj)| inv[(i, j)] * (g[kj][n] - nu[kj]))
                    .sum();
                dir[ki][n] = d;
                decrement += d * (g[ki][n] - nu[ki]);
            }
        }
        Some((dir, 0.5 * decrement))
    }
}

/// Joint outcome probabilities `p(j,k) = Σ_{m,n} ⟨m,n|σ|m,n⟩ θ_m^(j),s θ_n^(k),i`.
pub fn joint_outcome_probabilities(
    state: &TwoModeState,
    povm_s: &DetectorPovm,
    povm_i: &DetectorPovm,
) -> Result<OutcomeDistribution> {
    let cutoff = state.cutoff();
    let probs = contract_diagonal(&state.number_diagonal(), cutoff.dim(), povm_s, povm_i)?;
    Ok(OutcomeDistribution::new(
        povm_s.n_outcomes(),
        povm_i.n_outcomes(),
        probs,
        None,
        None,
    ))
}

/// Contracts a joint photon-number table (signal-major, `d × d`) with two POVMs.
pub(crate) fn contract_diagonal(
    diag: &[f64],
    d: usize,
    povm_s: &DetectorPovm,
    povm_i: &DetectorPovm,
) -> Result<Vec<f64>> {
    for p in [povm_s, povm_i] {
        if p.k_max() + 1 < d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: p.k_max() + 1,
            });
        }
    }
    if diag.len() != d * d {
        return Err(Error::DimensionMismatch {
            expected: d * d,
            found: diag.len(),
        });
    }
    let js = povm_s.n_outcomes();
    let ks = povm_i.n_outcomes();
    // tmp[m][k] = Σ_n diag[m][n] θ_n^(k),i
    let mut tmp = vec![0.0; d * ks];
    for m in 0..d {
        for n in 0..d {
            let v = diag[m * d + n];
            if v == 0.0 {
                continue;
            }
            for (k, t) in povm_i.theta[n].iter().enumerate() {
                tmp[m * ks + k] += v * t;
            }
        }
    }
    let mut out = vec![0.0; js * ks];
    for m in 0..d {
        for (j, t) in povm_s.theta[m].iter().enumerate() {
            if *t == 0.0 {
                continue;
            }
            for k in 0..ks {
                out[j * ks + k] += t * tmp[m * ks + k];
            }
        }
    }
    Ok(out)
}

/// Probe data in long format: one `(alpha_sq, outcome, count)` record per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub alpha_sq: f64,
    pub outcome: usize,
    pub count: u64,
}

/// Probe counts grouped per probe: `(probes, counts[m][n])`.
pub fn group_probe_records(records: &[ProbeRecord], n_outcomes: Option<usize>) -> Result<(ProbeSet, Vec<Vec<u64>>)> {
    if records.is_empty() {
        return Err(Error::InvalidData("no probe records".into()));
    }
    let width = n_outcomes.unwrap_or_else(|| records.iter().map(|r| r.outcome).max().unwrap_or(0) + 1);
    let mut grouped: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for r in records {
        if !(r.alpha_sq.is_finite() && r.alpha_sq >= 0.0) {
            return Err(Error::param("alpha_sq", r.alpha_sq, "probe mean photon number must be >= 0"));
        }
        if r.outcome >= width {
            return Err(Error::InvalidData(format!(
                "outcome {} exceeds the {width} outcomes requested",
                r.outcome
            )));
        }
        grouped.entry(r.alpha_sq.to_bits()).or_insert_with(|| vec![0; width])[r.outcome] += r.count;
    }
    let mut pairs: Vec<(f64, Vec<u64>)> = grouped.into_iter().map(|(b, c)| (f64::from_bits(b), c)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let amplitudes = pairs.iter().map(|p| p.0).collect();
    let shots = pairs.iter().map(|p| p.1.iter().sum()).collect();
    let counts = pairs.into_iter().map(|p| p.1).collect();
    Ok((ProbeSet::new(amplitudes, shots)?, counts))
}

pub fn read_probe_csv(path: impl AsRef<Path>) -> Result<Vec<ProbeRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn write_probe_csv(path: impl AsRef<Path>, probes: &ProbeSet, counts: &[Vec<u64>], header: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in header.lines() {
        writeln!(f, "# {line}")?;
    }
    writeln!(f, "alpha_sq,outcome,count")?;
    for (a, row) in probes.amplitudes.iter().zip(counts) {
        for (n, c) in row.iter().enumerate() {
            writeln!(f, "{a},{n},{c}")?;
        }
    }
    Ok(())
}

/// Draws probe counts from a known detector; each probe's outcome
/// distribution is renormalized over the truncated photon-number range.
pub fn simulate_probe_counts<R: rand::Rng + ?Sized>(
    povm: &DetectorPovm,
    probes: &ProbeSet,
    rng: &mut R,
) -> Result<Vec<Vec<u64>>> {
    let c = coherent_probe_matrix(probes, povm.k_max())?;
    let r = c * povm.as_matrix();
    Ok(r.row_iter()
        .zip(&probes.shots)
        .map(|(row, &shots)| {
            let total: f64 = row.sum();
            let p: Vec<f64> = row.iter().map(|v| v / total).collect();
            crate::sampling::multinomial(rng, shots, &p)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{FockCutoff, Mode};
    use crate::optics::{loss_channel, tmsv_state, SqueezingParams};

    #[test]
    fn ideal_pnr_rows() {
        let p = DetectorPovm::ideal_pnr(10, 12).unwrap();
        assert_eq!(p.theta(3, 3), 1.0);
        assert_eq!(p.theta(12, 10), 1.0);
        assert_eq!(p.theta(11, 10), 1.0);
        for row in p.rows() {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
        assert_eq!(p.outcomes()[10], ">=10");
        assert!(DetectorPovm::ideal_pnr(5, 4).is_err());
    }

    #[test]
    fn click_from_pnr() {
        let ideal = DetectorPovm::click_from(&DetectorPovm::ideal_pnr(4, 6).unwrap());
        for k in 0..=6 {
            assert_eq!(ideal.theta(k, 0), if k == 0 { 1.0 } else { 0.0 });
            assert_eq!(ideal.theta(k, 0) + ideal.theta(k, 1), 1.0);
        }
        let eta = 0.7;
        let lossy = DetectorPovm::click_from(&DetectorPovm::efficiency(eta, 6, 6).unwrap());
        for k in 0..=6 {
            assert!((lossy.theta(k, 0) - (1.0f64 - eta).powi(k as i32)).abs() < 1e-15);
        }
    }

    #[test]
    fn efficiency_povm_rows() {
        let p = DetectorPovm::efficiency(0.5, 4, 4).unwrap();
        assert_eq!(&p.rows()[2][..3], &[0.25, 0.5, 0.25]);
        let unit = DetectorPovm::efficiency(1.0, 5, 7).unwrap();
        assert_eq!(unit, DetectorPovm::ideal_pnr(5, 7).unwrap());
        assert!(DetectorPovm::efficiency(1.1, 3, 3).is_err());
    }

    #[test]
    fn povm_json_layout() {
        let p = DetectorPovm::efficiency(0.9, 3, 4).unwrap();
        let json = p.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["k_max"], 4);
        assert_eq!(v["outcomes"].as_array().unwrap().len(), 4);
        assert_eq!(v["theta"].as_array().unwrap().len(), 5);
        assert_eq!(DetectorPovm::from_json(&json).unwrap(), p);
    }

    #[test]
    fn povm_json_rejects_incomplete_rows() {
        let bad = r#"{"k_max": 1, "outcomes": ["0","1"], "theta": [[1.0, 0.0], [0.4, 0.4]]}"#;
        assert!(DetectorPovm::from_json(bad).is_err());
        let short = r#"{"k_max": 2, "outcomes": ["0","1"], "theta": [[1.0, 0.0], [0.0, 1.0]]}"#;
        assert!(DetectorPovm::from_json(short).is_err());
    }

    #[test]
    fn probe_matrix_values() {
        let probes = ProbeSet::uniform(vec![0.0, 1.0, 9.0], 1).unwrap();
        let c = coherent_probe_matrix(&probes, 9).unwrap();
        assert_eq!(c[(0, 0)], 1.0);
        assert_eq!(c.row(0).sum(), 1.0);
        assert!((c[(1, 1)] - (-1.0f64).exp()).abs() < 1e-15);
        // Poisson(9) mass above 9, summed term by term
        let mut tail = 0.0;
        let mut term = (-9.0f64).exp();
        for k in 1..200 {
            term *= 9.0 / k as f64;
            if k > 9 {
                tail += term;
            }
        }
        let deficits = probe_tail_deficits(&c);
        assert!((deficits[2] - tail).abs() < 1e-12);
        assert!(deficits[2] > 0.4);
        assert!(ProbeSet::uniform(vec![-1.0], 1).is_err());
    }

    #[test]
    fn noiseless_ideal_pnr_recovery() {
        let truth = DetectorPovm::ideal_pnr(9, 9).unwrap();
        let probes = ProbeSet::uniform(ProbeSet::default_ladder(), 1_000_000).unwrap();
        let c = coherent_probe_matrix(&probes, 9).unwrap();
        let r = model_response(&c, &truth).unwrap();
        let res = tomography_mle(&r, &c, &probes.shots, &TomographyOptions::default()).unwrap();
        let err = res.povm.max_abs_diff(&truth).unwrap();
        assert!(err < 1e-6, "max-abs error {err} {} {}", res.diagnostics.iterations, res.diagnostics.converged);
    }

    #[test]
    fn binomial_round_trips() {
        let truth = DetectorPovm::efficiency(0.9, 9, 9).unwrap();
        let probes = ProbeSet::uniform(ProbeSet::default_ladder(), 1_000_000).unwrap();
        let c = coherent_probe_matrix(&probes, 9).unwrap();
        let exact = model_response(&c, &truth).unwrap();
        let res = tomography_mle(&exact, &c, &probes.shots, &TomographyOptions::default()).unwrap();
        assert!(res.diagnostics.converged);
        assert!(res.povm.max_abs_diff(&truth).unwrap() < 1e-6);
        let tr = &res.diagnostics.log_likelihood_trace;
        assert!(tr.windows(2).all(|w| w[1] >= w[0]));

        let mut rng = crate::sampling::seeded_rng(11, 0);
        let counts = simulate_probe_counts(&truth, &probes, &mut rng).unwrap();
        let noisy = ResponseMatrix::from_counts(&counts).unwrap();
        let res = tomography_mle(&noisy, &c, &probes.shots, &TomographyOptions::default()).unwrap();
        // the maximizer must beat the generating POVM on its own data
        let pred = c.clone() * truth.as_matrix();
        let mut ll_truth = 0.0;
        for (m, row) in counts.iter().enumerate() {
            for (n, &k) in row.iter().enumerate() {
                if k > 0 {
                    ll_truth += k as f64 * pred[(m, n)].ln();
                }
            }
        }
        assert!(res.diagnostics.log_likelihood >= ll_truth - 1e-6);
        assert!(res.povm.max_abs_diff(&truth).unwrap() < 0.2);
        let tr = &res.diagnostics.log_likelihood_trace;
        assert!(tr.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn single_probe_is_not_identifiable() {
        let truth = DetectorPovm::ideal_pnr(3, 3).unwrap();
        let probes = ProbeSet::uniform(vec![1.0], 1000).unwrap();
        let c = coherent_probe_matrix(&probes, 3).unwrap();
        let r = model_response(&c, &truth).unwrap();
        let err = tomography_mle(&r, &c, &probes.shots, &TomographyOptions::default());
        assert!(matches!(err, Err(Error::Identifiability(_))));
    }

    #[test]
    fn vacuum_gives_certain_no_photon_outcome() {
        let cutoff = FockCutoff::new(4).unwrap();
        let s = TwoModeState::vacuum(cutoff);
        let p = DetectorPovm::efficiency(0.8, 4, 4).unwrap();
        let dist = joint_outcome_probabilities(&s, &p, &p).unwrap();
        assert_eq!(dist.prob(0, 0), 1.0);
    }

    #[test]
    fn click_probability_is_one_minus_vacuum() {
        let cutoff = FockCutoff::new(6).unwrap();
        let s = tmsv_state(SqueezingParams::new(0.5).unwrap(), cutoff);
        let s = loss_channel(&s, Mode::Signal, 0.6).unwrap();
        let click = DetectorPovm::click_from(&DetectorPovm::ideal_pnr(6, 6).unwrap());
        let pnr = DetectorPovm::ideal_pnr(6, 6).unwrap();
        let dist = joint_outcome_probabilities(&s, &click, &pnr).unwrap();
        let vac_s: f64 = (0..cutoff.dim()).map(|n| s.population(0, n)).sum();
        let click_s: f64 = (0..pnr.n_outcomes()).map(|k| dist.prob(1, k)).sum();
        assert!((click_s - (s.trace() - vac_s)).abs() < 1e-12);
    }

    #[test]
    fn povm_smaller_than_state_rejected() {
        let cutoff = FockCutoff::new(6).unwrap();
        let s = TwoModeState::vacuum(cutoff);
        let p = DetectorPovm::ideal_pnr(3, 4).unwrap();
        assert!(joint_outcome_probabilities(&s, &p, &p).is_err());
    }

    #[test]
    fn probe_records_group_by_amplitude() {
        let recs = vec![
            ProbeRecord { alpha_sq: 1.0, outcome: 0, count: 3 },
            ProbeRecord { alpha_sq: 0.5, outcome: 1, count: 2 },
            ProbeRecord { alpha_sq: 1.0, outcome: 2, count: 5 },
        ];
        let (probes, counts) = group_probe_records(&recs, None).unwrap();
        assert_eq!(probes.amplitudes, vec![0.5, 1.0]);
        assert_eq!(probes.shots, vec![2, 8]);
        assert_eq!(counts[1], vec![3, 0, 5]);
        assert!(group_probe_records(&recs, Some(2)).is_err());
    }
}
