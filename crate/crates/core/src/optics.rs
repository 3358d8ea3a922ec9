//! TMSV generation, beam splitters, phase shifters, pure-loss channels and the
//! full lossy Mach-Zehnder pipeline.
//!
//! Pipeline stages:
//!
//! ```text
//! σ₁ = |TMSV⟩⟨TMSV|
//! σ₂ = preparation loss (fictitious beam splitter per arm, ancilla traced out)
//! σ₃ = BS(1/2) ∘ phase ∘ BS(1/2) ∘ σ₂
//! σ₄ = detection loss applied to σ₃
//! ```
//!
//! Beam splitter convention: `a† → √η a† + i√(1-η) b†`,
//! `b† → i√(1-η) a† + √η b†` (symmetric, reflection phase `i`).

use std::f64::consts::TAU;

use nalgebra::SVD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{
    apply_local_channel, CMatrix, CVector, FockCutoff, KrausSet, Mode, ModeOperator,
    OperatorKind, TwoModeState, C64, ONE, ZERO,
};

/// Squeezing parameter `z ∈ [0, 1)` of a two-mode squeezed vacuum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqueezingParams {
    z: f64,
}

impl SqueezingParams {
    pub fn new(z: f64) -> Result<Self> {
        if !(z.is_finite() && (0.0..1.0).contains(&z)) {
            return Err(Error::param("z", z, "squeezing must lie in [0, 1)"));
        }
        Ok(Self { z })
    }

    /// Inverts `n̄ = 2z²/(1-z²)`.
    pub fn from_mean_photons(n_bar: f64) -> Result<Self> {
        if !(n_bar.is_finite() && n_bar >= 0.0) {
            return Err(Error::param("n_bar", n_bar, "mean photon number must be >= 0"));
        }
        Self::new((n_bar / (2.0 + n_bar)).sqrt())
    }

    pub fn z(self) -> f64 {
        self.z
    }

    /// Total mean photon number of both modes, `2z²/(1-z²)`.
    pub fn mean_photons(self) -> f64 {
        mean_photons_from_z(self.z)
    }
}

pub fn mean_photons_from_z(z: f64) -> f64 {
    let z2 = z * z;
    2.0 * z2 / (1.0 - z2)
}

/// Per-arm transmissivities of the preparation and detection fictitious beam splitters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    pub eta_p_s: f64,
    pub eta_p_i: f64,
    pub eta_d_s: f64,
    pub eta_d_i: f64,
}

impl LossModel {
    pub fn new(eta_p_s: f64, eta_p_i: f64, eta_d_s: f64, eta_d_i: f64) -> Result<Self> {
        let m = Self {
            eta_p_s,
            eta_p_i,
            eta_d_s,
            eta_d_i,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn lossless() -> Self {
        Self {
            eta_p_s: 1.0,
            eta_p_i: 1.0,
            eta_d_s: 1.0,
            eta_d_i: 1.0,
        }
    }

    /// Same transmissivity on all four fictitious beam splitters.
    pub fn uniform(eta: f64) -> Result<Self> {
        Self::new(eta, eta, eta, eta)
    }

    /// Total per-arm loss `loss`, split evenly between the preparation and
    /// detection stages (`η_p = η_d = √(1 - loss)`).
    pub fn symmetric_total_loss(loss: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&loss) {
            return Err(Error::param("loss", loss, "loss must lie in [0, 1]"));
        }
        let eta = (1.0 - loss).sqrt();
        Self::uniform(eta)
    }

    /// All loss at the detection stage.
    pub fn detection_only(eta_s: f64, eta_i: f64) -> Result<Self> {
        Self::new(1.0, 1.0, eta_s, eta_i)
    }

    /// Overall per-arm transmissivity `η_p η_d` as (signal, idler).
    pub fn overall(&self) -> (f64, f64) {
        (self.eta_p_s * self.eta_d_s, self.eta_p_i * self.eta_d_i)
    }

    /// Extra symmetric loss inserted in both arms at the preparation stage.
    pub fn with_added_loss(&self, loss: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&loss) {
            return Err(Error::param("loss", loss, "loss must lie in [0, 1]"));
        }
        Self::new(
            self.eta_p_s * (1.0 - loss),
            self.eta_p_i * (1.0 - loss),
            self.eta_d_s,
            self.eta_d_i,
        )
    }

    /// Exchanges the signal and idler labels.
    pub fn swapped(&self) -> Self {
        Self {
            eta_p_s: self.eta_p_i,
            eta_p_i: self.eta_p_s,
            eta_d_s: self.eta_d_i,
            eta_d_i: self.eta_d_s,
        }
    }

    pub fn is_lossless(&self) -> bool {
        [self.eta_p_s, self.eta_p_i, self.eta_d_s, self.eta_d_i]
            .iter()
            .all(|&e| e == 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta_p_s", self.eta_p_s),
            ("eta_p_i", self.eta_p_i),
            ("eta_d_s", self.eta_d_s),
            ("eta_d_i", self.eta_d_i),
        ] {
            check_eta(name, v)?;
        }
        Ok(())
    }
}

impl Default for LossModel {
    fn default() -> Self {
        Self::lossless()
    }
}

/// How the interferometer phase is distributed over the two arms.
///
/// Both choices give identical photon-number statistics; they differ by a
/// global phase conditioned on total photon number, which matters only for
/// the quantum Fisher information.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseConvention {
    /// `P_s(θ) ⊗ P_i(0)`, generator `n̂_s`. Assumes an external phase reference.
    #[default]
    SignalArm,
    /// `P_s(θ/2) ⊗ P_i(-θ/2)`, generator `(n̂_s - n̂_i)/2`.
    Balanced,
}

impl PhaseConvention {
    fn generator(self, n_s: usize, n_i: usize) -> f64 {
        match self {
            PhaseConvention::SignalArm => n_s as f64,
            PhaseConvention::Balanced => 0.5 * (n_s as f64 - n_i as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterferometerConfig {
    pub squeezing: SqueezingParams,
    pub loss: LossModel,
    /// Interferometer phase θ in radians, unreduced.
    pub phase: f64,
    pub cutoff: FockCutoff,
    #[serde(default)]
    pub phase_convention: PhaseConvention,
}

impl InterferometerConfig {
    pub fn new(squeezing: SqueezingParams, loss: LossModel, phase: f64, cutoff: FockCutoff) -> Self {
        Self {
            squeezing,
            loss,
            phase,
            cutoff,
            phase_convention: PhaseConvention::SignalArm,
        }
    }

    pub fn with_phase(mut self, phase: f64) -> Self {
        self.phase = phase;
        self
    }

    pub fn with_convention(mut self, convention: PhaseConvention) -> Self {
        self.phase_convention = convention;
        self
    }

    /// Phase reduced to `[0, 2π)`.
    pub fn reduced_phase(&self) -> f64 {
        self.phase.rem_euclid(TAU)
    }

    /// Largest number of pairs injected into the interferometer. Keeping
    /// `2·pairs ≤ cutoff` means every photon-number block the beam splitters
    /// touch fits completely in the truncated space.
    pub fn max_pairs(&self) -> usize {
        self.cutoff.max_photons() / 2
    }

    pub fn validate(&self) -> Result<()> {
        SqueezingParams::new(self.squeezing.z)?;
        self.loss.validate()?;
        if !self.phase.is_finite() {
            return Err(Error::param("phase", self.phase, "phase must be finite"));
        }
        FockCutoff::new(self.cutoff.max_photons())?;
        Ok(())
    }
}

fn check_eta(name: &'static str, eta: f64) -> Result<()> {
    if !(eta.is_finite() && (0.0..=1.0).contains(&eta)) {
        return Err(Error::param(name, eta, "transmissivity must lie in [0, 1]"));
    }
    Ok(())
}

/// Upper bound on the probability missing from a TMSV truncated after
/// `max_pairs` pairs: `(1-z²) Σ_{n>max_pairs} z^{2n} = z^{2(max_pairs+1)}`.
pub fn tmsv_tail_bound(z: f64, max_pairs: usize) -> f64 {
    (z * z).powi(max_pairs as i32 + 1)
}

/// TMSV with amplitude `√(1-z²) zⁿ` on `|n,n⟩` for every `n ≤ cutoff`.
pub fn tmsv_state(squeezing: SqueezingParams, cutoff: FockCutoff) -> TwoModeState {
    tmsv_state_pairs(squeezing, cutoff, cutoff.max_photons())
}

/// TMSV keeping only `|n,n⟩` with `n ≤ max_pairs` (clamped to the cutoff).
pub fn tmsv_state_pairs(
    squeezing: SqueezingParams,
    cutoff: FockCutoff,
    max_pairs: usize,
) -> TwoModeState {
    let z = squeezing.z();
    let norm = (1.0 - z * z).sqrt();
    let mut v = CVector::zeros(cutoff.joint_dim());
    let mut amp = norm;
    for n in 0..=max_pairs.min(cutoff.max_photons()) {
        v[cutoff.joint_index(n, n)] = C64::new(amp, 0.0);
        amp *= z;
    }
    TwoModeState::pure_unchecked(cutoff, v)
}

/// Joint indices grouped by total photon number `N = n₁ + n₂`; block `N`
/// lists the in-box states ordered by ascending `n₁`.
#[derive(Debug, Clone)]
pub(crate) struct PhotonBlocks {
    cutoff: FockCutoff,
    blocks: Vec<Vec<usize>>,
}

impl PhotonBlocks {
    pub(crate) fn new(cutoff: FockCutoff) -> Self {
        let c = cutoff.max_photons();
        let blocks = (0..=2 * c)
            .map(|big_n| {
                let lo = big_n.saturating_sub(c);
                let hi = big_n.min(c);
                (lo..=hi)
                    .map(|n1| cutoff.joint_index(n1, big_n - n1))
                    .collect()
            })
            .collect();
        Self { cutoff, blocks }
    }

    pub(crate) fn block(&self, big_n: usize) -> &[usize] {
        &self.blocks[big_n]
    }

    pub(crate) fn len(&self) -> usize {
        self.blocks.len()
    }

    fn is_complete(&self, big_n: usize) -> bool {
        big_n <= self.cutoff.max_photons()
    }
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

fn i_pow(k: usize) -> C64 {
    match k % 4 {
        0 => C64::new(1.0, 0.0),
        1 => C64::new(0.0, 1.0),
        2 => C64::new(-1.0, 0.0),
        _ => C64::new(0.0, -1.0),
    }
}

/// `⟨m, N-m| U(η) |n, N-n⟩` from the binomial expansion of
/// `(t a† + r b†)ⁿ (r a† + t b†)^{N-n}` with `t = √η`, `r = i√(1-η)`.
fn bs_element(eta: f64, big_n: usize, m: usize, n: usize, lnf: &[f64]) -> C64 {
    let t = eta.sqrt();
    let r_abs = (1.0 - eta).sqrt();
    let rest = big_n - n;
    let ln_ratio = 0.5 * (lnf[m] + lnf[big_n - m] - lnf[n] - lnf[rest]);
    let p_lo = m.saturating_sub(rest);
    let p_hi = n.min(m);
    let mut acc = ZERO;
    for p in p_lo..=p_hi {
        let q = m - p;
        let ln_binom = lnf[n] - lnf[p] - lnf[n - p] + lnf[rest] - lnf[q] - lnf[rest - q];
        let t_pow = p + rest - q;
        let r_pow = n - p + q;
        let mag = (ln_binom + ln_ratio).exp() * t.powi(t_pow as i32) * r_abs.powi(r_pow as i32);
        acc += i_pow(r_pow) * mag;
    }
    acc
}

/// Nearest unitary (polar factor) of a square matrix.
fn polar_unitary(m: CMatrix) -> CMatrix {
    let svd = SVD::new(m, true, true);
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    u * v_t
}

/// Beam splitter on two modes, stored block by block in total photon number.
#[derive(Debug, Clone)]
pub(crate) struct BlockUnitary {
    blocks: PhotonBlocks,
    mats: Vec<CMatrix>,
}

impl BlockUnitary {
    pub(crate) fn beam_splitter(eta: f64, cutoff: FockCutoff) -> Self {
        let blocks = PhotonBlocks::new(cutoff);
        let c = cutoff.max_photons();
        let lnf = ln_factorials(2 * c);
        let mats = (0..blocks.len())
            .map(|big_n| {
                let lo = big_n.saturating_sub(c);
                let size = blocks.block(big_n).len();
                let block = CMatrix::from_fn(size, size, |row, col| {
                    bs_element(eta, big_n, lo + row, lo + col, &lnf)
                });
                if blocks.is_complete(big_n) {
                    block
                } else {
                    // Truncated block: part of the amplitude would leave the box.
                    polar_unitary(block)
                }
            })
            .collect();
        Self { blocks, mats }
    }

    pub(crate) fn to_dense(&self) -> CMatrix {
        let dd = self.blocks.cutoff.joint_dim();
        let mut out = CMatrix::zeros(dd, dd);
        for (big_n, mat) in self.mats.iter().enumerate() {
            let idx = self.blocks.block(big_n);
            for (r, &gr) in idx.iter().enumerate() {
                for (c, &gc) in idx.iter().enumerate() {
                    out[(gr, gc)] = mat[(r, c)];
                }
            }
        }
        out
    }

    pub(crate) fn apply_vector(&self, v: &CVector) -> CVector {
        let mut out = CVector::zeros(v.len());
        for (big_n, mat) in self.mats.iter().enumerate() {
            let idx = self.blocks.block(big_n);
            for (r, &gr) in idx.iter().enumerate() {
                let mut acc = ZERO;
                for (c, &gc) in idx.iter().enumerate() {
                    acc += mat[(r, c)] * v[gc];
                }
                out[gr] = acc;
            }
        }
        out
    }

    /// `U M U†` computed block pair by block pair.
    pub(crate) fn conjugate(&self, m: &CMatrix) -> CMatrix {
        let dd = m.nrows();
        let mut out = CMatrix::zeros(dd, dd);
        for (n1, u1) in self.mats.iter().enumerate() {
            let idx1 = self.blocks.block(n1);
            for (n2, u2) in self.mats.iter().enumerate() {
                let idx2 = self.blocks.block(n2);
                let sub = CMatrix::from_fn(idx1.len(), idx2.len(), |r, c| m[(idx1[r], idx2[c])]);
                if sub.iter().all(|x| *x == ZERO) {
                    continue;
                }
                let res = u1 * sub * u2.adjoint();
                for (r, &gr) in idx1.iter().enumerate() {
                    for (c, &gc) in idx2.iter().enumerate() {
                        out[(gr, gc)] = res[(r, c)];
                    }
                }
            }
        }
        out
    }

    /// Diagonal of `U M U†` using only the diagonal blocks of `M`.
    pub(crate) fn conjugate_diagonal(&self, m: &CMatrix) -> Vec<f64> {
        let mut out = vec![0.0; m.nrows()];
        for (big_n, u) in self.mats.iter().enumerate() {
            let idx = self.blocks.block(big_n);
            let sub = CMatrix::from_fn(idx.len(), idx.len(), |r, c| m[(idx[r], idx[c])]);
            if sub.iter().all(|x| *x == ZERO) {
                continue;
            }
            let res = u * sub * u.adjoint();
            for (r, &gr) in idx.iter().enumerate() {
                out[gr] = res[(r, r)].re;
            }
        }
        out
    }
}

/// Two-mode beam splitter unitary with transmissivity `eta`, built exactly
/// block by block in total photon number.
///
/// Blocks with `N > cutoff` do not fit in the truncated space; they are
/// replaced by the nearest unitary of the truncated block, so only states
/// supported on `N ≤ cutoff` evolve exactly.
pub fn beam_splitter_unitary(eta: f64, cutoff: FockCutoff) -> Result<ModeOperator> {
    check_eta("eta", eta)?;
    let dense = BlockUnitary::beam_splitter(eta, cutoff).to_dense();
    Ok(ModeOperator::from_parts_unchecked(
        cutoff,
        2,
        OperatorKind::Unitary,
        dense,
    ))
}

/// Diagonal phase shift `e^{i n θ}` on the photon number of `mode`.
pub fn phase_shifter(theta: f64, mode: Mode, cutoff: FockCutoff) -> Result<ModeOperator> {
    if !theta.is_finite() {
        return Err(Error::param("theta", theta, "phase must be finite"));
    }
    let diag = CVector::from_fn(cutoff.joint_dim(), |k, _| {
        let (n_s, n_i) = cutoff.split_index(k);
        let n = if mode == Mode::Signal { n_s } else { n_i };
        C64::from_polar(1.0, n as f64 * theta)
    });
    Ok(ModeOperator::from_parts_unchecked(
        cutoff,
        2,
        OperatorKind::Unitary,
        CMatrix::from_diagonal(&diag),
    ))
}

/// Closed-form pure-loss Kraus operators
/// `K_l = Σ_n √(C(n,l) η^{n-l} (1-η)^l) |n-l⟩⟨n|`.
pub fn pure_loss_kraus(eta: f64, cutoff: FockCutoff) -> Result<KrausSet> {
    check_eta("eta", eta)?;
    KrausSet::new(cutoff, pure_loss_kraus_matrices(eta, cutoff))
}

fn pure_loss_kraus_matrices(eta: f64, cutoff: FockCutoff) -> Vec<CMatrix> {
    let d = cutoff.dim();
    let lnf = ln_factorials(d);
    (0..d)
        .map(|l| {
            let mut k = CMatrix::zeros(d, d);
            for n in l..d {
                let ln_binom = lnf[n] - lnf[l] - lnf[n - l];
                let w = ln_binom.exp() * eta.powi((n - l) as i32) * (1.0 - eta).powi(l as i32);
                k[(n - l, n)] = C64::new(w.sqrt(), 0.0);
            }
            k
        })
        .collect()
}

/// Operators `E_a = ⟨a|_anc U_BS(η) |0⟩_anc` obtained by mixing the mode with a
/// vacuum ancilla of the same cutoff; `Tr_anc[U (ρ ⊗ |0⟩⟨0|) U†] = Σ_a E_a ρ E_a†`.
pub fn ancilla_loss_operators(eta: f64, cutoff: FockCutoff) -> Result<Vec<CMatrix>> {
    check_eta("eta", eta)?;
    Ok(ancilla_operators_unchecked(eta, cutoff))
}

fn ancilla_operators_unchecked(eta: f64, cutoff: FockCutoff) -> Vec<CMatrix> {
    let d = cutoff.dim();
    let u = BlockUnitary::beam_splitter(eta, cutoff).to_dense();
    (0..d)
        .map(|anc| {
            CMatrix::from_fn(d, d, |out, inp| {
                u[(cutoff.joint_index(out, anc), cutoff.joint_index(inp, 0))]
            })
        })
        .collect()
}

/// Pure loss on `mode` via a fictitious beam splitter with a vacuum ancilla
/// that is traced out afterwards.
pub fn loss_channel(state: &TwoModeState, mode: Mode, eta: f64) -> Result<TwoModeState> {
    check_eta("eta", eta)?;
    let ops = ancilla_operators_unchecked(eta, state.cutoff());
    let rho = state.density_matrix();
    Ok(TwoModeState::density_unchecked(
        state.cutoff(),
        apply_local_channel(&ops, &rho, state.cutoff(), mode),
    ))
}

/// Same channel as [`loss_channel`], from the closed-form Kraus operators.
pub fn loss_channel_kraus(state: &TwoModeState, mode: Mode, eta: f64) -> Result<TwoModeState> {
    pure_loss_kraus(eta, state.cutoff())?.apply(state, mode)
}

/// Binomial thinning of a joint photon-number distribution: the diagonal of
/// the output of per-arm pure loss depends only on the input diagonal.
pub(crate) fn thin_diagonal(diag: &[f64], eta_s: f64, eta_i: f64, cutoff: FockCutoff) -> Vec<f64> {
    let d = cutoff.dim();
    let ws = binomial_table(eta_s, d);
    let wi = binomial_table(eta_i, d);
    // signal first: tmp[a, m] = Σ_n ws[n][a] diag[n, m]
    let mut tmp = vec![0.0; d * d];
    for n in 0..d {
        for a in 0..=n {
            let w = ws[n][a];
            if w == 0.0 {
                continue;
            }
            for m in 0..d {
                tmp[a * d + m] += w * diag[n * d + m];
            }
        }
    }
    let mut out = vec![0.0; d * d];
    for a in 0..d {
        for m in 0..d {
            let v = tmp[a * d + m];
            if v == 0.0 {
                continue;
            }
            for b in 0..=m {
                out[a * d + b] += wi[m][b] * v;
            }
        }
    }
    out
}

/// `table[n][k] = C(n,k) ηᵏ (1-η)^{n-k}`.
pub(crate) fn binomial_table(eta: f64, d: usize) -> Vec<Vec<f64>> {
    let lnf = ln_factorials(d);
    (0..d)
        .map(|n| {
            (0..=n)
                .map(|k| {
                    (lnf[n] - lnf[k] - lnf[n - k]).exp()
                        * eta.powi(k as i32)
                        * (1.0 - eta).powi((n - k) as i32)
                })
                .collect()
        })
        .collect()
}

/// Derivative of a state family with respect to the phase.
#[derive(Debug, Clone, PartialEq)]
pub enum StateDerivative {
    Pure(CVector),
    Density(CMatrix),
}

/// The phase-independent part of the pipeline, precomputed once so that
/// phase sweeps only pay for the phase-dependent stages.
#[derive(Debug, Clone)]
pub struct PreparedInterferometer {
    config: InterferometerConfig,
    bs: BlockUnitary,
    generator: Vec<f64>,
    /// `BS(1/2) σ₂ BS(1/2)†`
    mixed: CMatrix,
    /// Pure counterpart of `mixed` when no preparation loss is present.
    mixed_pure: Option<CVector>,
    det_ops: [Vec<CMatrix>; 2],
}

impl PreparedInterferometer {
    pub fn new(config: &InterferometerConfig) -> Result<Self> {
        config.validate()?;
        let cutoff = config.cutoff;
        let input = tmsv_state_pairs(config.squeezing, cutoff, config.max_pairs());
        let bs = BlockUnitary::beam_splitter(0.5, cutoff);
        let loss = config.loss;

        let prep_lossless = loss.eta_p_s == 1.0 && loss.eta_p_i == 1.0;
        let sigma2 = if prep_lossless {
            input.density_matrix()
        } else {
            let ops_s = ancilla_operators_unchecked(loss.eta_p_s, cutoff);
            let ops_i = ancilla_operators_unchecked(loss.eta_p_i, cutoff);
            let rho = apply_local_channel(&ops_s, &input.density_matrix(), cutoff, Mode::Signal);
            apply_local_channel(&ops_i, &rho, cutoff, Mode::Idler)
        };
        let mixed = bs.conjugate(&sigma2);
        let mixed_pure = prep_lossless.then(|| bs.apply_vector(input.amplitudes().expect("pure input")));

        let generator = (0..cutoff.joint_dim())
            .map(|k| {
                let (n_s, n_i) = cutoff.split_index(k);
                config.phase_convention.generator(n_s, n_i)
            })
            .collect();

        let det_ops = [
            ancilla_operators_unchecked(loss.eta_d_s, cutoff),
            ancilla_operators_unchecked(loss.eta_d_i, cutoff),
        ];

        Ok(Self {
            config: *config,
            bs,
            generator,
            mixed,
            mixed_pure,
            det_ops,
        })
    }

    pub fn config(&self) -> &InterferometerConfig {
        &self.config
    }

    pub fn cutoff(&self) -> FockCutoff {
        self.config.cutoff
    }

    /// Probability mass dropped by truncating the TMSV input.
    pub fn truncation_tail(&self) -> f64 {
        tmsv_tail_bound(self.config.squeezing.z(), self.config.max_pairs())
    }

    fn phased(&self, theta: f64) -> (CMatrix, CMatrix) {
        let dd = self.mixed.nrows();
        let mut y = CMatrix::zeros(dd, dd);
        let mut dy = CMatrix::zeros(dd, dd);
        for r in 0..dd {
            for c in 0..dd {
                let x = self.mixed[(r, c)];
                if x == ZERO {
                    continue;
                }
                let dg = self.generator[r] - self.generator[c];
                let v = x * C64::from_polar(1.0, dg * theta);
                y[(r, c)] = v;
                dy[(r, c)] = C64::new(0.0, dg) * v;
            }
        }
        (y, dy)
    }

    fn detect(&self, m: &CMatrix) -> CMatrix {
        let cutoff = self.cutoff();
        let loss = self.config.loss;
        let mut out = m.clone();
        if loss.eta_d_s != 1.0 {
            out = apply_local_channel(&self.det_ops[0], &out, cutoff, Mode::Signal);
        }
        if loss.eta_d_i != 1.0 {
            out = apply_local_channel(&self.det_ops[1], &out, cutoff, Mode::Idler);
        }
        out
    }

    /// σ₄ at phase `theta`.
    pub fn state_at(&self, theta: f64) -> TwoModeState {
        let (y, _) = self.phased(theta);
        let sigma3 = self.bs.conjugate(&y);
        TwoModeState::density_unchecked(self.cutoff(), self.detect(&sigma3))
    }

    /// σ₄ and dσ₄/dθ at phase `theta`. The derivative is exact: the phase
    /// unitary is differentiated and pushed through the fixed linear maps.
    pub fn state_and_derivative_at(&self, theta: f64) -> (TwoModeState, CMatrix) {
        let (y, dy) = self.phased(theta);
        let sigma3 = self.bs.conjugate(&y);
        let dsigma3 = self.bs.conjugate(&dy);
        (
            TwoModeState::density_unchecked(self.cutoff(), self.detect(&sigma3)),
            self.detect(&dsigma3),
        )
    }

    /// Pure output state and its derivative, available only without loss.
    pub fn pure_state_and_derivative_at(&self, theta: f64) -> Option<(TwoModeState, CVector)> {
        if !self.config.loss.is_lossless() {
            return None;
        }
        let x = self.mixed_pure.as_ref()?;
        let y = CVector::from_fn(x.len(), |k, _| x[k] * C64::from_polar(1.0, self.generator[k] * theta));
        let dy = CVector::from_fn(x.len(), |k, _| C64::new(0.0, self.generator[k]) * y[k]);
        let psi = self.bs.apply_vector(&y);
        let dpsi = self.bs.apply_vector(&dy);
        Some((TwoModeState::pure_unchecked(self.cutoff(), psi), dpsi))
    }

    /// Joint photon-number distribution of σ₄ and its phase derivative.
    ///
    /// Only the diagonal photon-number blocks of σ₂ reach the diagonal of
    /// σ₃, and the detection loss acts on the diagonal as binomial thinning,
    /// so this path never forms σ₄.
    pub fn number_distribution_at(&self, theta: f64) -> (Vec<f64>, Vec<f64>) {
        let (y, dy) = self.phased(theta);
        let diag = self.bs.conjugate_diagonal(&y);
        let ddiag = self.bs.conjugate_diagonal(&dy);
        let loss = self.config.loss;
        let cutoff = self.cutoff();
        (
            thin_diagonal(&diag, loss.eta_d_s, loss.eta_d_i, cutoff),
            thin_diagonal(&ddiag, loss.eta_d_s, loss.eta_d_i, cutoff),
        )
    }
}

/// Joint photon-number distribution of σ₄ and its phase derivative, computed
/// without forming any density matrix.
///
/// Local loss on a TMSV leaves no coherence between distinct states of equal
/// total photon number, and the interferometer conserves that number. Within
/// each block the interferometer therefore only needs transition
/// probabilities `|⟨x|U(θ)|a⟩|²` applied to the populations of σ₂.
#[derive(Debug, Clone)]
pub struct NumberStatistics {
    config: InterferometerConfig,
    /// `populations[N][m]`: weight of `|m, N-m⟩` in σ₂.
    populations: Vec<Vec<f64>>,
    /// Balanced beam splitter restricted to block `N`.
    bs: Vec<CMatrix>,
    /// Phase generator on `|m, N-m⟩`.
    generator: Vec<Vec<f64>>,
    thin_s: Vec<Vec<f64>>,
    thin_i: Vec<Vec<f64>>,
}

impl NumberStatistics {
    pub fn new(config: &InterferometerConfig) -> Result<Self> {
        config.validate()?;
        let pairs = config.max_pairs();
        let z2 = config.squeezing.z() * config.squeezing.z();
        let ws = binomial_table(config.loss.eta_p_s, pairs + 1);
        let wi = binomial_table(config.loss.eta_p_i, pairs + 1);
        let mut weight = 1.0 - z2;
        let mut populations: Vec<Vec<f64>> = (0..=2 * pairs).map(|n| vec![0.0; n + 1]).collect();
        for n in 0..=pairs {
            for a in 0..=n {
                for b in 0..=n {
                    populations[a + b][a] += weight * ws[n][a] * wi[n][b];
                }
            }
            weight *= z2;
        }
        let lnf = ln_factorials(2 * pairs);
        let bs = (0..=2 * pairs)
            .map(|big_n| CMatrix::from_fn(big_n + 1, big_n + 1, |r, c| bs_element(0.5, big_n, r, c, &lnf)))
            .collect();
        let generator = (0..=2 * pairs)
            .map(|big_n| {
                (0..=big_n)
                    .map(|m| config.phase_convention.generator(m, big_n - m))
                    .collect()
            })
            .collect();
        let d = config.cutoff.dim();
        Ok(Self {
            config: *config,
            populations,
            bs,
            generator,
            thin_s: binomial_table(config.loss.eta_d_s, d),
            thin_i: binomial_table(config.loss.eta_d_i, d),
        })
    }

    pub fn config(&self) -> &InterferometerConfig {
        &self.config
    }

    pub fn cutoff(&self) -> FockCutoff {
        self.config.cutoff
    }

    /// Probability mass dropped by truncating the TMSV input.
    pub fn truncation_tail(&self) -> f64 {
        tmsv_tail_bound(self.config.squeezing.z(), self.config.max_pairs())
    }

    /// `(p, dp/dθ)` over `|n_s, n_i⟩`, signal-major, after detection loss.
    pub fn distribution_at(&self, theta: f64) -> (Vec<f64>, Vec<f64>) {
        let cutoff = self.cutoff();
        let d = cutoff.dim();
        let mut diag = vec![0.0; d * d];
        let mut ddiag = vec![0.0; d * d];
        for (big_n, b) in self.bs.iter().enumerate() {
            let pops = &self.populations[big_n];
            if pops.iter().all(|&p| p == 0.0) {
                continue;
            }
            let size = big_n + 1;
            let phase = CVector::from_fn(size, |m, _| C64::from_polar(1.0, self.generator[big_n][m] * theta));
            let dphase = CVector::from_fn(size, |m, _| C64::new(0.0, self.generator[big_n][m]) * phase[m]);
            let u = b * CMatrix::from_diagonal(&phase) * b;
            let du = b * CMatrix::from_diagonal(&dphase) * b;
            for x in 0..size {
                let (mut p, mut dp) = (0.0, 0.0);
                for (a, &q) in pops.iter().enumerate() {
                    if q == 0.0 {
                        continue;
                    }
                    let ux = u[(x, a)];
                    p += q * ux.norm_sqr();
                    dp += q * 2.0 * (ux.conj() * du[(x, a)]).re;
                }
                let k = cutoff.joint_index(x, big_n - x);
                diag[k] = p;
                ddiag[k] = dp;
            }
        }
        (self.thin(&diag), self.thin(&ddiag))
    }

    fn thin(&self, diag: &[f64]) -> Vec<f64> {
        let d = self.cutoff().dim();
        let mut tmp = vec![0.0; d * d];
        for n in 0..d {
            for (a, &w) in self.thin_s[n].iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for m in 0..d {
                    tmp[a * d + m] += w * diag[n * d + m];
                }
            }
        }
        let mut out = vec![0.0; d * d];
        for a in 0..d {
            for m in 0..d {
                let v = tmp[a * d + m];
                if v == 0.0 {
                    continue;
                }
                for (b, &w) in self.thin_i[m].iter().enumerate() {
                    out[a * d + b] += w * v;
                }
            }
        }
        out
    }
}

/// σ₄ for the given configuration.
pub fn evolve_pipeline(config: &InterferometerConfig) -> Result<TwoModeState> {
    Ok(PreparedInterferometer::new(config)?.state_at(config.phase))
}

/// dσ₄/dθ at `config.phase`.
pub fn analytic_phase_derivative(config: &InterferometerConfig) -> Result<StateDerivative> {
    let prepared = PreparedInterferometer::new(config)?;
    let (_, d) = prepared.state_and_derivative_at(config.phase);
    Ok(StateDerivative::Density(d))
}

/// `U|ψ⟩` for a two-mode unitary.
pub fn apply_unitary_vector(u: &ModeOperator, v: &CVector) -> CVector {
    u.matrix() * v
}

/// Unit vector `|n_s, n_i⟩`.
pub fn basis_vector(n_s: usize, n_i: usize, cutoff: FockCutoff) -> CVector {
    let mut v = CVector::zeros(cutoff.joint_dim());
    v[cutoff.joint_index(n_s, n_i)] = ONE;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{max_abs, partial_trace, unitarity_residual};
    use std::f64::consts::{FRAC_1_SQRT_2, PI};

    fn cut(n: usize) -> FockCutoff {
        FockCutoff::new(n).unwrap()
    }

    #[test]
    fn number_statistics_match_density_pipeline() {
        for conv in [PhaseConvention::SignalArm, PhaseConvention::Balanced] {
            let loss = LossModel::new(0.7, 0.9, 0.8, 0.6).unwrap();
            let cfg = InterferometerConfig::new(SqueezingParams::new(0.45).unwrap(), loss, 0.0, cut(8))
                .with_convention(conv);
            let dense = PreparedInterferometer::new(&cfg).unwrap();
            let fast = NumberStatistics::new(&cfg).unwrap();
            for &t in &[0.0, 0.4, 1.9, 4.4] {
                let (p1, d1) = dense.number_distribution_at(t);
                let (p2, d2) = fast.distribution_at(t);
                let (rho, _) = dense.state_and_derivative_at(t);
                let p3 = rho.number_diagonal();
                for k in 0..p1.len() {
                    assert!((p1[k] - p2[k]).abs() < 1e-14);
                    assert!((p3[k] - p2[k]).abs() < 1e-14);
                    assert!((d1[k] - d2[k]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn squeezing_validation() {
        assert!(SqueezingParams::new(1.0).is_err());
        assert!(SqueezingParams::new(-0.1).is_err());
        assert!(SqueezingParams::new(f64::NAN).is_err());
        assert_eq!(SqueezingParams::new(0.5).unwrap().mean_photons(), 2.0 / 3.0);
    }

    #[test]
    fn vacuum_for_zero_squeezing() {
        let s = tmsv_state(SqueezingParams::new(0.0).unwrap(), cut(4));
        assert_eq!(s.amplitude(0, 0), Some(ONE));
        assert_eq!(s.trace(), 1.0);
    }

    #[test]
    fn tmsv_amplitude_at_two_pairs() {
        let s = tmsv_state(SqueezingParams::new(0.5).unwrap(), cut(10));
        let a = s.amplitude(2, 2).unwrap();
        assert!((a.re - 0.75f64.sqrt() * 0.25).abs() < 1e-15);
        assert_eq!(s.amplitude(2, 1).unwrap(), ZERO);
    }

    #[test]
    fn beam_splitter_identity_at_full_transmission() {
        let u = beam_splitter_unitary(1.0, cut(5)).unwrap();
        assert!(max_abs(&(u.matrix() - CMatrix::identity(36, 36))) < 1e-15);
    }

    #[test]
    fn beam_splitter_rejects_bad_eta() {
        assert!(beam_splitter_unitary(1.5, cut(2)).is_err());
        assert!(beam_splitter_unitary(-0.1, cut(2)).is_err());
    }

    #[test]
    fn hong_ou_mandel_cancellation() {
        let c = cut(4);
        let u = beam_splitter_unitary(0.5, c).unwrap();
        let out = apply_unitary_vector(&u, &basis_vector(1, 1, c));
        assert!(out[c.joint_index(1, 1)].norm() < 1e-15);
        assert!((out[c.joint_index(2, 0)].norm_sqr() - 0.5).abs() < 1e-14);
        assert!((out[c.joint_index(0, 2)].norm_sqr() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn single_photon_splits_evenly() {
        let c = cut(3);
        let u = beam_splitter_unitary(0.5, c).unwrap();
        let out = apply_unitary_vector(&u, &basis_vector(1, 0, c));
        assert!((out[c.joint_index(1, 0)].norm() - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((out[c.joint_index(0, 1)].norm() - FRAC_1_SQRT_2).abs() < 1e-15);
        // reflection picks up the phase i
        assert!((out[c.joint_index(0, 1)] - C64::new(0.0, FRAC_1_SQRT_2)).norm() < 1e-15);
    }

    #[test]
    fn beam_splitter_unitary_everywhere() {
        for eta in [0.0, 0.1, 0.5, 0.77, 1.0] {
            for c in [1, 3, 6, 10] {
                let u = beam_splitter_unitary(eta, cut(c)).unwrap();
                assert!(unitarity_residual(u.matrix()) < 1e-10, "eta {eta} cutoff {c}");
            }
        }
    }

    #[test]
    fn beam_splitter_conserves_total_photon_number() {
        let c = cut(5);
        let u = beam_splitter_unitary(0.3, c).unwrap();
        for r in 0..c.joint_dim() {
            for col in 0..c.joint_dim() {
                let (a, b) = c.split_index(r);
                let (x, y) = c.split_index(col);
                if a + b != x + y {
                    assert_eq!(u.matrix()[(r, col)], ZERO);
                }
            }
        }
    }

    #[test]
    fn phase_shifter_examples() {
        let c = cut(3);
        let p0 = phase_shifter(0.0, Mode::Signal, c).unwrap();
        assert!(max_abs(&(p0.matrix() - CMatrix::identity(16, 16))) < 1e-15);
        let p = phase_shifter(PI, Mode::Signal, c).unwrap();
        let k = c.joint_index(1, 0);
        assert!((p.matrix()[(k, k)] + ONE).norm() < 1e-15);
        let p = phase_shifter(PI / 2.0, Mode::Idler, c).unwrap();
        let k = c.joint_index(0, 2);
        assert!((p.matrix()[(k, k)] + ONE).norm() < 1e-15);
        assert!(phase_shifter(f64::INFINITY, Mode::Signal, c).is_err());
    }

    #[test]
    fn loss_examples() {
        let c = cut(3);
        let one = TwoModeState::fock(1, 0, c).unwrap();
        let unchanged = loss_channel(&one, Mode::Signal, 1.0).unwrap();
        assert!(max_abs(&(unchanged.density_matrix() - one.density_matrix())) < 1e-15);

        let gone = loss_channel(&TwoModeState::fock(3, 2, c).unwrap(), Mode::Signal, 0.0).unwrap();
        let marginal = partial_trace(&gone, Mode::Idler).unwrap();
        assert!((marginal.number_distribution()[0] - 1.0).abs() < 1e-15);

        let eta = 0.3;
        let out = loss_channel(&one, Mode::Signal, eta).unwrap();
        let marginal = partial_trace(&out, Mode::Idler).unwrap().number_distribution();
        assert!((marginal[0] - (1.0 - eta)).abs() < 1e-15);
        assert!((marginal[1] - eta).abs() < 1e-15);

        assert!(loss_channel(&one, Mode::Signal, 1.2).is_err());
    }

    #[test]
    fn loss_scales_mean_photons() {
        let c = cut(6);
        let s = tmsv_state(SqueezingParams::new(0.4).unwrap(), c);
        for eta in [0.0, 0.25, 0.8] {
            let out = loss_channel(&s, Mode::Idler, eta).unwrap();
            let before = s.mean_photons(Mode::Idler);
            assert!((out.mean_photons(Mode::Idler) - eta * before).abs() < 1e-10);
            assert!((out.mean_photons(Mode::Signal) - s.mean_photons(Mode::Signal)).abs() < 1e-12);
        }
    }

    #[test]
    fn kraus_set_is_complete() {
        for eta in [0.0, 0.4, 1.0] {
            assert!(pure_loss_kraus(eta, cut(8)).is_ok());
        }
    }

    #[test]
    fn thinning_matches_dense_channel() {
        let c = cut(4);
        let s = tmsv_state(SqueezingParams::new(0.6).unwrap(), c);
        let dense = loss_channel(&loss_channel(&s, Mode::Signal, 0.7).unwrap(), Mode::Idler, 0.4).unwrap();
        let thin = thin_diagonal(&s.number_diagonal(), 0.7, 0.4, c);
        for (a, b) in dense.number_diagonal().iter().zip(&thin) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_squeezing_pipeline_is_vacuum() {
        let cfg = InterferometerConfig::new(
            SqueezingParams::new(0.0).unwrap(),
            LossModel::uniform(0.7).unwrap(),
            1.3,
            cut(4),
        );
        let s = evolve_pipeline(&cfg).unwrap();
        assert!((s.population(0, 0) - 1.0).abs() < 1e-14);
        let StateDerivative::Density(d) = analytic_phase_derivative(&cfg).unwrap() else {
            unreachable!()
        };
        assert!(max_abs(&d) < 1e-15);
    }

    #[test]
    fn lossless_pipeline_keeps_even_total_photon_number() {
        let cfg = InterferometerConfig::new(
            SqueezingParams::new(0.4).unwrap(),
            LossModel::lossless(),
            0.0,
            cut(6),
        );
        let s = evolve_pipeline(&cfg).unwrap();
        for (k, p) in s.number_diagonal().iter().enumerate() {
            let (a, b) = cfg.cutoff.split_index(k);
            if (a + b) % 2 == 1 {
                assert!(p.abs() < 1e-15);
            }
        }
    }

    #[test]
    fn derivative_is_traceless() {
        let cfg = InterferometerConfig::new(
            SqueezingParams::new(0.3).unwrap(),
            LossModel::new(0.9, 0.8, 0.85, 0.95).unwrap(),
            0.7,
            cut(6),
        );
        let StateDerivative::Density(d) = analytic_phase_derivative(&cfg).unwrap() else {
            unreachable!()
        };
        assert!(d.trace().norm() < 1e-14);
    }

    #[test]
    fn reduced_phase_keeps_raw_value() {
        let cfg = InterferometerConfig::new(
            SqueezingParams::new(0.1).unwrap(),
            LossModel::lossless(),
            -PI / 2.0,
            cut(2),
        );
        assert!((cfg.reduced_phase() - 1.5 * PI).abs() < 1e-15);
        assert_eq!(cfg.phase, -PI / 2.0);
    }

    #[test]
    fn tmsv_reduced_state_is_thermal() {
        let z = 0.45f64;
        let c = cut(8);
        let s = tmsv_state(SqueezingParams::new(z).unwrap(), c);
        let red = partial_trace(&s, Mode::Idler).unwrap();
        let expected: Vec<f64> = (0..c.dim())
            .map(|n| (1.0 - z * z) * z.powi(2 * n as i32))
            .collect();
        for (a, b) in red.number_distribution().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
