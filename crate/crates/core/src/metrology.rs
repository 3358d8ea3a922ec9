//! Classical and quantum Fisher information, the shot-noise baseline and the
//! comparison metrics built on them.

use std::f64::consts::{PI, TAU};
use std::io::Write;
use std::path::Path;

use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{contract_diagonal, DetectorPovm};
use crate::error::{Error, Result};
use crate::fock::{hermitian_residual, max_abs, CMatrix, StateRepr, TwoModeState};
use crate::optics::{
    InterferometerConfig, LossModel, NumberStatistics, PhaseConvention, PreparedInterferometer, SqueezingParams, StateDerivative,
};
use crate::optimize::golden_section_max;

/// Outcomes with probability at or below this are dropped from the CFI sum.
pub const P_FLOOR: f64 = 1e-15;
/// Derivatives at or below this on a floored outcome are treated as zero.
pub const DERIVATIVE_GUARD: f64 = 1e-12;
/// Eigenvalue-pair floor in the SLD sum.
pub const LAMBDA_FLOOR: f64 = 1e-12;
pub const DEFAULT_GRID_POINTS: usize = 2048;

/// Joint outcome probabilities `p(j,k)`, stored row-major in `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeDistribution {
    n_signal: usize,
    n_idler: usize,
    probs: Vec<f64>,
    dprobs: Option<Vec<f64>>,
    phase: Option<f64>,
}

impl OutcomeDistribution {
    pub fn new(
        n_signal: usize,
        n_idler: usize,
        probs: Vec<f64>,
        dprobs: Option<Vec<f64>>,
        phase: Option<f64>,
    ) -> Self {
        Self {
            n_signal,
            n_idler,
            probs,
            dprobs,
            phase,
        }
    }

    /// A flat distribution over arbitrary outcomes.
    pub fn flat(probs: Vec<f64>, dprobs: Option<Vec<f64>>) -> Self {
        let n = probs.len();
        Self::new(n, 1, probs, dprobs, None)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_signal, self.n_idler)
    }

    pub fn prob(&self, j: usize, k: usize) -> f64 {
        self.probs[j * self.n_idler + k]
    }

    pub fn dprob(&self, j: usize, k: usize) -> Option<f64> {
        self.dprobs.as_ref().map(|d| d[j * self.n_idler + k])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dprobs(&self) -> Option<&[f64]> {
        self.dprobs.as_deref()
    }

    pub fn phase(&self) -> Option<f64> {
        self.phase
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// `F = Σ_i (∂p_i)² / p_i`, per trial.
pub fn classical_fisher(dist: &OutcomeDistribution) -> Result<f64> {
    let dprobs = dist
        .dprobs
        .as_ref()
        .ok_or_else(|| Error::InvalidData("outcome distribution carries no phase derivatives".into()))?;
    if dprobs.len() != dist.probs.len() {
        return Err(Error::DimensionMismatch {
            expected: dist.probs.len(),
            found: dprobs.len(),
        });
    }
    fisher_sum(&dist.probs, dprobs)
}

fn fisher_sum(p: &[f64], dp: &[f64]) -> Result<f64> {
    let mut fi = 0.0;
    for (i, (&p, &dp)) in p.iter().zip(dp).enumerate() {
        if p < -P_FLOOR || p.is_nan() {
            return Err(Error::InvalidData(format!("outcome {i} has negative probability {p:e}")));
        }
        if p > P_FLOOR {
            fi += dp * dp / p;
        } else if dp.abs() > DERIVATIVE_GUARD {
            log::warn!("outcome {i}: probability {p:e} at the floor with derivative {dp:e}; term dropped");
        }
    }
    Ok(fi)
}

fn check_hermitian(m: &CMatrix) -> Result<()> {
    let residual = hermitian_residual(m);
    if residual > 1e-10 * max_abs(m).max(1.0) {
        return Err(Error::NotHermitian { residual });
    }
    Ok(())
}

/// Quantum Fisher information of a state family at one point.
///
/// A pure state with a vector derivative uses
/// `4(⟨∂ψ|∂ψ⟩ - |⟨ψ|∂ψ⟩|²/⟨ψ|ψ⟩)`; anything else goes through the symmetric
/// logarithmic derivative, `2 Σ_{λa+λb > floor} |⟨a|∂ρ|b⟩|² / (λa+λb)`.
///
/// States are not renormalized. A truncated state of weight `w < 1` is read
/// as one block of a direct sum whose missing weight carries no phase
/// information, which is how the outcome probabilities treat it too.
pub fn quantum_fisher(state: &TwoModeState, derivative: &StateDerivative) -> Result<f64> {
    match (state.repr(), derivative) {
        (StateRepr::Pure(psi), StateDerivative::Pure(dpsi)) => {
            if psi.len() != dpsi.len() {
                return Err(Error::DimensionMismatch {
                    expected: psi.len(),
                    found: dpsi.len(),
                });
            }
            let norm = psi.norm_squared();
            if norm <= 0.0 {
                return Err(Error::InvalidState("zero state vector".into()));
            }
            let overlap = psi.dotc(dpsi);
            Ok((4.0 * (dpsi.norm_squared() - overlap.norm_sqr() / norm)).max(0.0))
        }
        (_, StateDerivative::Density(drho)) => quantum_fisher_mixed(&state.density_matrix(), drho),
        (StateRepr::Density(_), StateDerivative::Pure(_)) => Err(Error::InvalidState(
            "vector derivative supplied for a density-matrix state".into(),
        )),
    }
}

/// SLD quantum Fisher information from `ρ` and `∂ρ`.
pub fn quantum_fisher_mixed(rho: &CMatrix, drho: &CMatrix) -> Result<f64> {
    if rho.shape() != drho.shape() {
        return Err(Error::DimensionMismatch {
            expected: rho.nrows(),
            found: drho.nrows(),
        });
    }
    check_hermitian(rho)?;
    check_hermitian(drho)?;

    // Basis states that neither ρ nor ∂ρ touch contribute nothing; dropping
    // them shrinks the eigenproblem considerably for truncated pair states.
    let n = rho.nrows();
    let support: Vec<usize> = (0..n)
        .filter(|&i| rho[(i, i)].re != 0.0 || (0..n).any(|j| drho[(i, j)].norm_sqr() != 0.0))
        .collect();
    if support.is_empty() {
        return Ok(0.0);
    }
    let m = support.len();
    let sub = |a: &CMatrix| CMatrix::from_fn(m, m, |r, c| a[(support[r], support[c])]);
    let rho_s = sub(rho);
    let rho_s = (&rho_s + rho_s.adjoint()) * crate::fock::C64::new(0.5, 0.0);
    let eig = SymmetricEigen::new(rho_s);
    let v = &eig.eigenvectors;
    let d = v.adjoint() * sub(drho) * v;
    let lambda = &eig.eigenvalues;

    let mut qfi = 0.0;
    for a in 0..m {
        for b in 0..m {
            let s = lambda[a] + lambda[b];
            if s > LAMBDA_FLOOR {
                qfi += 2.0 * d[(a, b)].norm_sqr() / s;
            }
        }
    }
    Ok(qfi)
}

/// `F_SNL = n̄ = 2z²/(1-z²)`.
pub fn shot_noise_limit(squeezing: SqueezingParams) -> f64 {
    squeezing.mean_photons()
}

/// `n` uniform phases on `[0, 2π)`.
pub fn uniform_phase_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| TAU * i as f64 / n as f64).collect()
}

/// Outcome distribution with derivative at one phase of a prepared setup.
pub fn outcome_distribution_at(
    stats: &NumberStatistics,
    povm_s: &DetectorPovm,
    povm_i: &DetectorPovm,
    theta: f64,
) -> Result<OutcomeDistribution> {
    let d = stats.cutoff().dim();
    let (diag, ddiag) = stats.distribution_at(theta);
    let probs = contract_diagonal(&diag, d, povm_s, povm_i)?;
    let dprobs = contract_diagonal(&ddiag, d, povm_s, povm_i)?;
    Ok(OutcomeDistribution::new(
        povm_s.n_outcomes(),
        povm_i.n_outcomes(),
        probs,
        Some(dprobs),
        Some(theta),
    ))
}

/// Classical Fisher information at one phase.
pub fn cfi_at(stats: &NumberStatistics, povm_s: &DetectorPovm, povm_i: &DetectorPovm, theta: f64) -> Result<f64> {
    classical_fisher(&outcome_distribution_at(stats, povm_s, povm_i, theta)?)
}

/// Quantum Fisher information of the detected state at one phase.
pub fn qfi_at(prepared: &PreparedInterferometer, theta: f64) -> Result<f64> {
    if let Some((psi, dpsi)) = prepared.pure_state_and_derivative_at(theta) {
        return quantum_fisher(&psi, &StateDerivative::Pure(dpsi));
    }
    let (state, d) = prepared.state_and_derivative_at(theta);
    quantum_fisher_mixed(&state.density_matrix(), &d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QfiMode {
    /// Skip the quantum Fisher information.
    None,
    /// QFI of the lossy detected state.
    Lossy,
    /// QFI of both the lossy state and its lossless counterpart.
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FisherReport {
    pub phase_grid: Vec<f64>,
    pub cfi: Vec<f64>,
    /// QFI of the lossy detected state; empty when not computed.
    pub qfi: Vec<f64>,
    /// QFI with all loss removed; empty when not computed.
    pub qfi_lossless: Vec<f64>,
    pub snl: f64,
    /// FI divided by the generated mean photon number.
    pub cfi_per_photon: Vec<f64>,
    pub qfi_per_photon: Vec<f64>,
    pub truncation_tail: f64,
    pub config: InterferometerConfig,
    pub config_hash: String,
}

/// FNV-1a over a canonical JSON rendering.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).unwrap_or_default();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn per_photon(values: &[f64], n_bar: f64) -> Vec<f64> {
    values
        .iter()
        .map(|v| if n_bar > 0.0 { v / n_bar } else { 0.0 })
        .collect()
}

/// Fisher information over a phase grid.
///
/// The QFI is computed with the balanced phase convention, which does not
/// credit phase information carried by an external reference beam. Outcome
/// statistics, and so the CFI, do not depend on the convention.
pub fn sweep_fisher(
    template: &InterferometerConfig,
    phase_grid: &[f64],
    povm_s: &DetectorPovm,
    povm_i: &DetectorPovm,
    qfi: QfiMode,
) -> Result<FisherReport> {
    if phase_grid.is_empty() {
        return Err(Error::InvalidData("empty phase grid".into()));
    }
    let stats = NumberStatistics::new(template)?;
    let cfi = phase_grid
        .par_iter()
        .map(|&t| cfi_at(&stats, povm_s, povm_i, t))
        .collect::<Result<Vec<_>>>()?;

    let balanced = template.with_convention(PhaseConvention::Balanced);
    let qfi_over = |cfg: &InterferometerConfig| -> Result<Vec<f64>> {
        let p = PreparedInterferometer::new(cfg)?;
        phase_grid.par_iter().map(|&t| qfi_at(&p, t)).collect()
    };
    let (qfi_lossy, qfi_lossless) = match qfi {
        QfiMode::None => (Vec::new(), Vec::new()),
        QfiMode::Lossy => (qfi_over(&balanced)?, Vec::new()),
        QfiMode::Both => {
            let mut lossless = balanced;
            lossless.loss = LossModel::lossless();
            (qfi_over(&balanced)?, qfi_over(&lossless)?)
        }
    };

    let snl = shot_noise_limit(template.squeezing);
    Ok(FisherReport {
        phase_grid: phase_grid.to_vec(),
        cfi_per_photon: per_photon(&cfi, snl),
        qfi_per_photon: per_photon(&qfi_lossy, snl),
        cfi,
        qfi: qfi_lossy,
        qfi_lossless,
        snl,
        truncation_tail: stats.truncation_tail(),
        config: *template,
        config_hash: config_hash(template),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FisherKind {
    Cfi,
    Qfi,
}

/// Share of `[0, 2π)` on which the chosen FI exceeds the SNL.
///
/// Each grid point stands for the cell between the midpoints to its periodic
/// neighbours, so non-uniform grids are weighted correctly.
pub fn sub_snl_fraction(report: &FisherReport, which: FisherKind) -> Result<f64> {
    if report.snl <= 0.0 {
        return Err(Error::param("snl", report.snl, "sub-SNL fraction needs a positive shot-noise limit"));
    }
    let values = match which {
        FisherKind::Cfi => &report.cfi,
        FisherKind::Qfi => &report.qfi,
    };
    if values.len() != report.phase_grid.len() || values.is_empty() {
        return Err(Error::InvalidData(format!("{which:?} values missing from the report")));
    }
    if values.len() < 1000 {
        log::warn!("sub-SNL fraction from only {} phases", values.len());
    }
    let mut pts: Vec<(f64, f64)> = report
        .phase_grid
        .iter()
        .map(|t| t.rem_euclid(TAU))
        .zip(values.iter().copied())
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pts.len();
    if n == 1 {
        return Ok(if pts[0].1 > report.snl { 1.0 } else { 0.0 });
    }
    let mut above = 0.0;
    for i in 0..n {
        let prev = if i == 0 { pts[n - 1].0 - TAU } else { pts[i - 1].0 };
        let next = if i == n - 1 { pts[0].0 + TAU } else { pts[i + 1].0 };
        if pts[i].1 > report.snl {
            above += 0.5 * (next - prev);
        }
    }
    Ok((above / TAU).clamp(0.0, 1.0))
}

/// Maximum CFI over phase: coarse grid, then golden-section refinement
/// around the best grid point. Returns `(phase, cfi)`.
pub fn max_cfi(
    stats: &NumberStatistics,
    povm_s: &DetectorPovm,
    povm_i: &DetectorPovm,
    coarse_points: usize,
    tol: f64,
) -> Result<(f64, f64)> {
    let grid = uniform_phase_grid(coarse_points.max(3));
    let values = grid
        .par_iter()
        .map(|&t| cfi_at(stats, povm_s, povm_i, t))
        .collect::<Result<Vec<_>>>()?;
    let (best, _) = values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let h = grid[1] - grid[0];
    let (theta, _) = golden_section_max(
        |t| cfi_at(stats, povm_s, povm_i, t).unwrap_or(f64::NEG_INFINITY),
        grid[best] - h,
        grid[best] + h,
        tol,
    );
    let value = cfi_at(stats, povm_s, povm_i, theta)?;
    if value >= values[best] {
        Ok((theta.rem_euclid(TAU), value))
    } else {
        Ok((grid[best], values[best]))
    }
}

/// Maximum QFI over a uniform grid, refined by golden section.
pub fn max_qfi(prepared: &PreparedInterferometer, coarse_points: usize, tol: f64) -> Result<(f64, f64)> {
    let grid = uniform_phase_grid(coarse_points.max(3));
    let values = grid.par_iter().map(|&t| qfi_at(prepared, t)).collect::<Result<Vec<_>>>()?;
    let (best, _) = values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let h = grid[1] - grid[0];
    let (theta, value) = golden_section_max(
        |t| qfi_at(prepared, t).unwrap_or(f64::NEG_INFINITY),
        grid[best] - h,
        grid[best] + h,
        tol,
    );
    if value >= values[best] {
        Ok((theta.rem_euclid(TAU), value))
    } else {
        Ok((grid[best], values[best]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub n_bar: f64,
    pub max_cfi_pnr: f64,
    pub max_cfi_click: f64,
    pub ratio: f64,
}

/// Settings shared by the phase-maximizing metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxSearch {
    pub coarse_points: usize,
    pub tol: f64,
}

impl Default for MaxSearch {
    fn default() -> Self {
        Self {
            coarse_points: 256,
            tol: 1e-6,
        }
    }
}

/// `max_θ CFI(PNR) / max_θ CFI(click)` over a grid of mean photon numbers,
/// with the click detectors obtained by coarse-graining the PNR POVMs.
pub fn pnr_click_ratio(
    template: &InterferometerConfig,
    n_bar_grid: &[f64],
    pnr_s: &DetectorPovm,
    pnr_i: &DetectorPovm,
    search: MaxSearch,
) -> Result<Vec<RatioPoint>> {
    let click_s = DetectorPovm::click_from(pnr_s);
    let click_i = DetectorPovm::click_from(pnr_i);
    n_bar_grid
        .iter()
        .map(|&n_bar| {
            let mut cfg = *template;
            cfg.squeezing = SqueezingParams::from_mean_photons(n_bar)?;
            let stats = NumberStatistics::new(&cfg)?;
            let (_, pnr) = max_cfi(&stats, pnr_s, pnr_i, search.coarse_points, search.tol)?;
            let (_, click) = max_cfi(&stats, &click_s, &click_i, search.coarse_points, search.tol)?;
            Ok(RatioPoint {
                n_bar,
                max_cfi_pnr: pnr,
                max_cfi_click: click,
                ratio: pnr / click,
            })
        })
        .collect()
}

/// Largest loss, as produced by `loss_for`, at which the CFI at `phase` still
/// exceeds the SNL. Bisects on `[0, hi]` to `tol`; returns `None` if even zero
/// loss does not beat the SNL and `Some(hi)` if `hi` still does.
pub fn max_tolerable_loss<F>(
    template: &InterferometerConfig,
    povm_s: &DetectorPovm,
    povm_i: &DetectorPovm,
    phase: f64,
    loss_for: F,
    hi: f64,
    tol: f64,
) -> Result<Option<f64>>
where
    F: Fn(f64) -> Result<LossModel>,
{
    let snl = shot_noise_limit(template.squeezing);
    let margin = |loss: f64| -> Result<f64> {
        let mut cfg = *template;
        cfg.loss = loss_for(loss)?;
        let stats = NumberStatistics::new(&cfg)?;
        Ok(cfi_at(&stats, povm_s, povm_i, phase)? - snl)
    };
    if margin(0.0)? <= 0.0 {
        return Ok(None);
    }
    if margin(hi)? > 0.0 {
        return Ok(Some(hi));
    }
    let (mut lo, mut up) = (0.0, hi);
    while up - lo > tol {
        let mid = 0.5 * (lo + up);
        if margin(mid)? > 0.0 {
            lo = mid;
        } else {
            up = mid;
        }
    }
    Ok(Some(0.5 * (lo + up)))
}

/// Phase-averaging helpers accept radians; this converts a degree input.
pub fn degrees_to_radians(deg: f64) -> f64 {
    deg * PI / 180.0
}

impl FisherReport {
    /// CSV with `#` provenance lines; columns `phase,cfi,qfi,snl,cfi_per_photon`.
    /// The `qfi` column is empty when the QFI was not computed.
    pub fn write_csv<W: Write>(&self, mut w: W, provenance: &str) -> Result<()> {
        for line in provenance.lines() {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "phase,cfi,qfi,snl,cfi_per_photon")?;
        for i in 0..self.phase_grid.len() {
            let qfi = self.qfi.get(i).map(|v| format!("{v:.12e}")).unwrap_or_default();
            writeln!(
                w,
                "{:.12e},{:.12e},{},{:.12e},{:.12e}",
                self.phase_grid[i], self.cfi[i], qfi, self.snl, self.cfi_per_photon[i]
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, provenance: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f, provenance)?;
        f.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{FockCutoff, SingleModeState, C64, CVector};
    use crate::optics::LossModel;

    fn cfg(z: f64, loss: LossModel, cutoff: usize) -> InterferometerConfig {
        InterferometerConfig::new(
            SqueezingParams::new(z).unwrap(),
            loss,
            0.0,
            FockCutoff::new(cutoff).unwrap(),
        )
    }

    #[test]
    fn constant_distribution_has_zero_fi() {
        let d = OutcomeDistribution::flat(vec![0.25; 4], Some(vec![0.0; 4]));
        assert_eq!(classical_fisher(&d).unwrap(), 0.0);
    }

    #[test]
    fn two_outcome_interferometer_has_unit_fi() {
        for &t in &[0.1, 0.7, 1.5, 2.9] {
            let p = vec![(t / 2.0f64).cos().powi(2), (t / 2.0f64).sin().powi(2)];
            let dp = vec![-0.5 * t.sin(), 0.5 * t.sin()];
            let fi = classical_fisher(&OutcomeDistribution::flat(p, Some(dp))).unwrap();
            assert!((fi - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_probability_rejected() {
        let d = OutcomeDistribution::flat(vec![1.1, -0.1], Some(vec![0.0, 0.0]));
        assert!(classical_fisher(&d).is_err());
        let missing = OutcomeDistribution::flat(vec![1.0], None);
        assert!(classical_fisher(&missing).is_err());
    }

    #[test]
    fn floored_outcomes_contribute_nothing() {
        let d = OutcomeDistribution::flat(vec![1.0, 0.0], Some(vec![0.0, 1e-13]));
        assert_eq!(classical_fisher(&d).unwrap(), 0.0);
    }

    fn rotated(single: &SingleModeState, cutoff: FockCutoff) -> (TwoModeState, CVector) {
        // single mode ⊗ vacuum, generator n̂_s
        let d = cutoff.dim();
        let amps = match single.repr() {
            StateRepr::Pure(v) => v.clone(),
            _ => unreachable!(),
        };
        let mut psi = CVector::zeros(cutoff.joint_dim());
        let mut dpsi = CVector::zeros(cutoff.joint_dim());
        for n in 0..d {
            psi[cutoff.joint_index(n, 0)] = amps[n];
            dpsi[cutoff.joint_index(n, 0)] = C64::new(0.0, n as f64) * amps[n];
        }
        (TwoModeState::pure(cutoff, psi).unwrap(), dpsi)
    }

    #[test]
    fn fock_state_has_zero_qfi() {
        let c = FockCutoff::new(5).unwrap();
        let (psi, dpsi) = rotated(&SingleModeState::fock(3, c).unwrap(), c);
        assert!(quantum_fisher(&psi, &StateDerivative::Pure(dpsi.clone())).unwrap().abs() < 1e-12);
        let rho = psi.to_density();
        let drho = &dpsi * psi.amplitudes().unwrap().adjoint() + psi.amplitudes().unwrap() * dpsi.adjoint();
        assert!(quantum_fisher(&rho, &StateDerivative::Density(drho)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn coherent_state_qfi_is_four_times_variance() {
        let c = FockCutoff::new(40).unwrap();
        let alpha = 1.3;
        let single = SingleModeState::coherent(C64::new(alpha, 0.0), c);
        let (psi, dpsi) = rotated(&single, c);
        let q = quantum_fisher(&psi, &StateDerivative::Pure(dpsi)).unwrap();
        assert!((q - 4.0 * alpha * alpha).abs() < 1e-9, "{q}");
    }

    #[test]
    fn non_hermitian_derivative_rejected() {
        let c = FockCutoff::new(2).unwrap();
        let s = TwoModeState::vacuum(c).to_density();
        let mut d = CMatrix::zeros(9, 9);
        d[(0, 1)] = C64::new(1.0, 0.0);
        assert!(matches!(
            quantum_fisher(&s, &StateDerivative::Density(d)),
            Err(Error::NotHermitian { .. })
        ));
    }

    #[test]
    fn shot_noise_limit_values() {
        assert_eq!(shot_noise_limit(SqueezingParams::new(0.0).unwrap()), 0.0);
        assert!((shot_noise_limit(SqueezingParams::new(0.5).unwrap()) - 2.0 / 3.0).abs() < 1e-15);
        let s = SqueezingParams::from_mean_photons(3.631e-3).unwrap();
        assert!((shot_noise_limit(s) - 3.631e-3).abs() < 1e-15);
    }

    #[test]
    fn vacuum_sweep_is_zero() {
        let p = DetectorPovm::ideal_pnr(10, 10).unwrap();
        let r = sweep_fisher(&cfg(0.0, LossModel::uniform(0.9).unwrap(), 10), &uniform_phase_grid(16), &p, &p, QfiMode::Both)
            .unwrap();
        assert!(r.cfi.iter().chain(&r.qfi).chain(&r.qfi_lossless).all(|v| v.abs() < 1e-15));
        assert!(sub_snl_fraction(&r, FisherKind::Cfi).is_err());
    }

    #[test]
    fn cfi_is_even_in_phase() {
        let p = DetectorPovm::ideal_pnr(8, 8).unwrap();
        let stats = NumberStatistics::new(&cfg(0.3, LossModel::uniform(0.8).unwrap(), 8)).unwrap();
        for &t in &[0.3, 1.1, 2.5] {
            let a = cfi_at(&stats, &p, &p, t).unwrap();
            let b = cfi_at(&stats, &p, &p, -t).unwrap();
            assert!((a - b).abs() < 1e-12 * a.max(1e-300));
        }
    }

    #[test]
    fn pure_and_mixed_qfi_agree() {
        let prepared = PreparedInterferometer::new(
            &cfg(0.4, LossModel::lossless(), 8).with_convention(PhaseConvention::Balanced),
        )
        .unwrap();
        for &t in &[0.2, 0.9, 2.0] {
            let (psi, dpsi) = prepared.pure_state_and_derivative_at(t).unwrap();
            let pure = quantum_fisher(&psi, &StateDerivative::Pure(dpsi)).unwrap();
            let (rho, drho) = prepared.state_and_derivative_at(t);
            let mixed = quantum_fisher(&rho, &StateDerivative::Density(drho)).unwrap();
            assert!((pure - mixed).abs() < 1e-8, "{pure} {mixed}");
        }
    }

    #[test]
    fn fraction_counts_cells() {
        let mut r = sweep_fisher(
            &cfg(0.1, LossModel::lossless(), 4),
            &uniform_phase_grid(8),
            &DetectorPovm::ideal_pnr(4, 4).unwrap(),
            &DetectorPovm::ideal_pnr(4, 4).unwrap(),
            QfiMode::None,
        )
        .unwrap();
        r.snl = 1.0;
        r.cfi = vec![0.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!((sub_snl_fraction(&r, FisherKind::Cfi).unwrap() - 0.25).abs() < 1e-15);
        r.cfi = vec![0.0; 8];
        assert_eq!(sub_snl_fraction(&r, FisherKind::Cfi).unwrap(), 0.0);
    }

    #[test]
    fn config_hash_is_stable() {
        let c = cfg(0.1, LossModel::lossless(), 4);
        assert_eq!(config_hash(&c), config_hash(&c));
        assert_ne!(config_hash(&c), config_hash(&c.with_phase(1.0)));
    }
}
