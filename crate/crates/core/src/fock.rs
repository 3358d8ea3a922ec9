//! Truncated Fock-space states and operators for one and two bosonic modes.
//!
//! Two-mode objects live on the product space with joint index
//! `n_s * d + n_i` (signal-major), where `d = max_photons + 1`. Storage is
//! dense throughout.

use std::fmt;

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Max-abs tolerance for U†U = 𝕀 and Σ K†K = 𝕀.
pub const UNITARY_TOL: f64 = 1e-10;
/// Max-abs tolerance for ρ = ρ†.
pub const HERMITIAN_TOL: f64 = 1e-10;
/// Eigenvalues of a density operator may dip this far below zero.
pub const PSD_TOL: f64 = 1e-10;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);

/// Per-mode photon-number truncation. The mode dimension is `max_photons + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FockCutoff(usize);

impl FockCutoff {
    pub const DEFAULT: FockCutoff = FockCutoff(10);

    pub fn new(max_photons: usize) -> Result<Self> {
        if max_photons == 0 {
            return Err(Error::param(
                "max_photons",
                0.0,
                "at least one photon per mode is required",
            ));
        }
        Ok(FockCutoff(max_photons))
    }

    pub fn max_photons(self) -> usize {
        self.0
    }

    /// Single-mode dimension.
    pub fn dim(self) -> usize {
        self.0 + 1
    }

    /// Two-mode dimension, `dim²`.
    pub fn joint_dim(self) -> usize {
        self.dim() * self.dim()
    }

    pub fn joint_index(self, n_s: usize, n_i: usize) -> usize {
        debug_assert!(n_s <= self.0 && n_i <= self.0);
        n_s * self.dim() + n_i
    }

    pub fn split_index(self, index: usize) -> (usize, usize) {
        (index / self.dim(), index % self.dim())
    }

    pub fn ensure_same(self, other: FockCutoff) -> Result<()> {
        if self != other {
            return Err(Error::CutoffMismatch {
                left: self.0,
                right: other.0,
            });
        }
        Ok(())
    }
}

impl Default for FockCutoff {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl fmt::Display for FockCutoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Signal,
    Idler,
}

impl Mode {
    pub fn other(self) -> Mode {
        match self {
            Mode::Signal => Mode::Idler,
            Mode::Idler => Mode::Signal,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StateRepr {
    Pure(CVector),
    Density(CMatrix),
}

impl StateRepr {
    fn density_matrix(&self) -> CMatrix {
        match self {
            StateRepr::Pure(v) => v * v.adjoint(),
            StateRepr::Density(m) => m.clone(),
        }
    }

    fn trace(&self) -> f64 {
        match self {
            StateRepr::Pure(v) => v.norm_squared(),
            StateRepr::Density(m) => m.trace().re,
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        match self {
            StateRepr::Pure(v) => v.iter().map(|c| c.norm_sqr()).collect(),
            StateRepr::Density(m) => m.diagonal().iter().map(|c| c.re).collect(),
        }
    }
}

/// A pure or mixed state of one truncated mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleModeState {
    cutoff: FockCutoff,
    repr: StateRepr,
}

impl SingleModeState {
    pub fn vacuum(cutoff: FockCutoff) -> Self {
        Self::fock(0, cutoff).expect("vacuum fits any cutoff")
    }

    pub fn fock(n: usize, cutoff: FockCutoff) -> Result<Self> {
        if n > cutoff.max_photons() {
            return Err(Error::param("n", n as f64, "photon number exceeds cutoff"));
        }
        let mut v = CVector::zeros(cutoff.dim());
        v[n] = ONE;
        Ok(Self {
            cutoff,
            repr: StateRepr::Pure(v),
        })
    }

    /// Coherent state truncated at the cutoff; amplitudes are not renormalized.
    pub fn coherent(alpha: C64, cutoff: FockCutoff) -> Self {
        let mut v = CVector::zeros(cutoff.dim());
        let mut amp = C64::new((-0.5 * alpha.norm_sqr()).exp(), 0.0);
        for n in 0..cutoff.dim() {
            if n > 0 {
                amp *= alpha / (n as f64).sqrt();
            }
            v[n] = amp;
        }
        Self {
            cutoff,
            repr: StateRepr::Pure(v),
        }
    }

    pub fn pure(cutoff: FockCutoff, amplitudes: CVector) -> Result<Self> {
        check_len(amplitudes.len(), cutoff.dim())?;
        check_norm(amplitudes.norm_squared())?;
        Ok(Self {
            cutoff,
            repr: StateRepr::Pure(amplitudes),
        })
    }

    pub fn density(cutoff: FockCutoff, rho: CMatrix) -> Result<Self> {
        check_len(rho.nrows(), cutoff.dim())?;
        validate_density(&rho)?;
        Ok(Self {
            cutoff,
            repr: StateRepr::Density(rho),
        })
    }

    pub(crate) fn density_unchecked(cutoff: FockCutoff, rho: CMatrix) -> Self {
        debug_assert_eq!(rho.nrows(), cutoff.dim());
        Self {
            cutoff,
            repr: StateRepr::Density(rho),
        }
    }

    pub fn cutoff(&self) -> FockCutoff {
        self.cutoff
    }

    pub fn repr(&self) -> &StateRepr {
        &self.repr
    }

    pub fn density_matrix(&self) -> CMatrix {
        self.repr.density_matrix()
    }

    pub fn trace(&self) -> f64 {
        self.repr.trace()
    }

    /// Photon-number distribution ⟨n|ρ|n⟩.
    pub fn number_distribution(&self) -> Vec<f64> {
        self.repr.diagonal()
    }

    pub fn mean_photons(&self) -> f64 {
        self.number_distribution()
            .iter()
            .enumerate()
            .map(|(n, p)| n as f64 * p)
            .sum()
    }
}

/// A pure or mixed state of the signal and idler modes.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoModeState {
    cutoff: FockCutoff,
    repr: StateRepr,
}

impl TwoModeState {
    pub fn vacuum(cutoff: FockCutoff) -> Self {
        Self::fock(0, 0, cutoff).expect("vacuum fits any cutoff")
    }

    pub fn fock(n_s: usize, n_i: usize, cutoff: FockCutoff) -> Result<Self> {
        if n_s.max(n_i) > cutoff.max_photons() {
            return Err(Error::param(
                "n",
                n_s.max(n_i) as f64,
                "photon number exceeds cutoff",
            ));
        }
        let mut v = CVector::zeros(cutoff.joint_dim());
        v[cutoff.joint_index(n_s, n_i)] = ONE;
        Ok(Self {
            cutoff,
            repr: StateRepr::Pure(v),
        })
    }

    pub fn pure(cutoff: FockCutoff, amplitudes: CVector) -> Result<Self> {
        check_len(amplitudes.len(), cutoff.joint_dim())?;
        check_norm(amplitudes.norm_squared())?;
        Ok(Self {
            cutoff,
            repr: StateRepr::Pure(amplitudes),
        })
    }

    pub fn density(cutoff: FockCutoff, rho: CMatrix) -> Result<Self> {
        if rho.nrows() != rho.ncols() {
            return Err(Error::NotSquare {
                rows: rho.nrows(),
                cols: rho.ncols(),
            });
        }
        check_len(rho.nrows(), cutoff.joint_dim())?;
        validate_density(&rho)?;
        Ok(Self {
            cutoff,
            repr: StateRepr::Density(rho),
        })
    }

    pub(crate) fn pure_unchecked(cutoff: FockCutoff, amplitudes: CVector) -> Self {
        debug_assert_eq!(amplitudes.len(), cutoff.joint_dim());
        Self {
            cutoff,
            repr: StateRepr::Pure(amplitudes),
        }
    }

    pub(crate) fn density_unchecked(cutoff: FockCutoff, rho: CMatrix) -> Self {
        debug_assert_eq!(rho.nrows(), cutoff.joint_dim());
        Self {
            cutoff,
            repr: StateRepr::Density(rho),
        }
    }

    pub fn cutoff(&self) -> FockCutoff {
        self.cutoff
    }

    pub fn repr(&self) -> &StateRepr {
        &self.repr
    }

    pub fn is_pure_vector(&self) -> bool {
        matches!(self.repr, StateRepr::Pure(_))
    }

    pub fn amplitudes(&self) -> Option<&CVector> {
        match &self.repr {
            StateRepr::Pure(v) => Some(v),
            StateRepr::Density(_) => None,
        }
    }

    /// Amplitude ⟨n_s, n_i|ψ⟩ of a pure state.
    pub fn amplitude(&self, n_s: usize, n_i: usize) -> Option<C64> {
        self.amplitudes()
            .map(|v| v[self.cutoff.joint_index(n_s, n_i)])
    }

    pub fn density_matrix(&self) -> CMatrix {
        self.repr.density_matrix()
    }

    pub fn to_density(&self) -> TwoModeState {
        Self::density_unchecked(self.cutoff, self.density_matrix())
    }

    pub fn trace(&self) -> f64 {
        self.repr.trace()
    }

    /// Joint photon-number distribution ⟨n_s,n_i|ρ|n_s,n_i⟩ in joint-index order.
    pub fn number_diagonal(&self) -> Vec<f64> {
        self.repr.diagonal()
    }

    /// Probability of (n_s, n_i).
    pub fn population(&self, n_s: usize, n_i: usize) -> f64 {
        let k = self.cutoff.joint_index(n_s, n_i);
        match &self.repr {
            StateRepr::Pure(v) => v[k].norm_sqr(),
            StateRepr::Density(m) => m[(k, k)].re,
        }
    }

    pub fn mean_photons(&self, mode: Mode) -> f64 {
        let diag = self.number_diagonal();
        diag.iter()
            .enumerate()
            .map(|(k, p)| {
                let (n_s, n_i) = self.cutoff.split_index(k);
                let n = match mode {
                    Mode::Signal => n_s,
                    Mode::Idler => n_i,
                };
                n as f64 * p
            })
            .sum()
    }

    /// Checks Hermiticity, positivity and trace of a density representation.
    pub fn validate(&self) -> Result<()> {
        match &self.repr {
            StateRepr::Pure(v) => check_norm(v.norm_squared()),
            StateRepr::Density(m) => validate_density(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    Unitary,
    Observable,
    General,
}

/// A dense operator on one mode (`d × d`) or on both modes (`d² × d²`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModeOperator {
    cutoff: FockCutoff,
    modes: usize,
    kind: OperatorKind,
    matrix: CMatrix,
}

impl ModeOperator {
    fn dims_for(cutoff: FockCutoff, modes: usize) -> Result<usize> {
        match modes {
            1 => Ok(cutoff.dim()),
            2 => Ok(cutoff.joint_dim()),
            _ => Err(Error::param("modes", modes as f64, "only one or two modes")),
        }
    }

    pub fn general(cutoff: FockCutoff, modes: usize, matrix: CMatrix) -> Result<Self> {
        let d = Self::dims_for(cutoff, modes)?;
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::NotSquare {
                rows: matrix.nrows(),
                cols: matrix.ncols(),
            });
        }
        check_len(matrix.nrows(), d)?;
        Ok(Self {
            cutoff,
            modes,
            kind: OperatorKind::General,
            matrix,
        })
    }

    pub fn unitary(cutoff: FockCutoff, modes: usize, matrix: CMatrix) -> Result<Self> {
        let mut op = Self::general(cutoff, modes, matrix)?;
        let residual = unitarity_residual(&op.matrix);
        if residual > UNITARY_TOL {
            return Err(Error::NotUnitary { residual });
        }
        op.kind = OperatorKind::Unitary;
        Ok(op)
    }

    pub fn observable(cutoff: FockCutoff, modes: usize, matrix: CMatrix) -> Result<Self> {
        let mut op = Self::general(cutoff, modes, matrix)?;
        let residual = hermitian_residual(&op.matrix);
        if residual > HERMITIAN_TOL {
            return Err(Error::NotHermitian { residual });
        }
        op.kind = OperatorKind::Observable;
        Ok(op)
    }

    pub fn identity(cutoff: FockCutoff, modes: usize) -> Result<Self> {
        let d = Self::dims_for(cutoff, modes)?;
        Ok(Self {
            cutoff,
            modes,
            kind: OperatorKind::Unitary,
            matrix: CMatrix::identity(d, d),
        })
    }

    /// n̂ on a single mode.
    pub fn number(cutoff: FockCutoff) -> Self {
        let d = cutoff.dim();
        let matrix = CMatrix::from_diagonal(&CVector::from_fn(d, |n, _| C64::new(n as f64, 0.0)));
        Self {
            cutoff,
            modes: 1,
            kind: OperatorKind::Observable,
            matrix,
        }
    }

    /// n̂ of one mode, embedded in the two-mode space.
    pub fn mode_number(cutoff: FockCutoff, mode: Mode) -> Self {
        let diag = CVector::from_fn(cutoff.joint_dim(), |k, _| {
            let (n_s, n_i) = cutoff.split_index(k);
            let n = if mode == Mode::Signal { n_s } else { n_i };
            C64::new(n as f64, 0.0)
        });
        Self {
            cutoff,
            modes: 2,
            kind: OperatorKind::Observable,
            matrix: CMatrix::from_diagonal(&diag),
        }
    }

    /// n̂_s + n̂_i.
    pub fn total_number(cutoff: FockCutoff) -> Self {
        let diag = CVector::from_fn(cutoff.joint_dim(), |k, _| {
            let (n_s, n_i) = cutoff.split_index(k);
            C64::new((n_s + n_i) as f64, 0.0)
        });
        Self {
            cutoff,
            modes: 2,
            kind: OperatorKind::Observable,
            matrix: CMatrix::from_diagonal(&diag),
        }
    }

    pub(crate) fn from_parts_unchecked(
        cutoff: FockCutoff,
        modes: usize,
        kind: OperatorKind,
        matrix: CMatrix,
    ) -> Self {
        Self {
            cutoff,
            modes,
            kind,
            matrix,
        }
    }

    pub fn cutoff(&self) -> FockCutoff {
        self.cutoff
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    pub fn adjoint(&self) -> ModeOperator {
        Self {
            cutoff: self.cutoff,
            modes: self.modes,
            kind: self.kind,
            matrix: self.matrix.adjoint(),
        }
    }

    /// Product `self · rhs`; the result is unitary if both factors are.
    pub fn compose(&self, rhs: &ModeOperator) -> Result<ModeOperator> {
        self.cutoff.ensure_same(rhs.cutoff)?;
        if self.modes != rhs.modes {
            return Err(Error::DimensionMismatch {
                expected: self.matrix.nrows(),
                found: rhs.matrix.nrows(),
            });
        }
        let kind = if self.kind == OperatorKind::Unitary && rhs.kind == OperatorKind::Unitary {
            OperatorKind::Unitary
        } else {
            OperatorKind::General
        };
        Ok(Self {
            cutoff: self.cutoff,
            modes: self.modes,
            kind,
            matrix: &self.matrix * &rhs.matrix,
        })
    }

    /// Applies a two-mode operator as `X ∘ ρ = X ρ X†` (or `X|ψ⟩` for pure states).
    pub fn apply(&self, state: &TwoModeState) -> Result<TwoModeState> {
        self.cutoff.ensure_same(state.cutoff)?;
        if self.modes != 2 {
            return Err(Error::DimensionMismatch {
                expected: self.cutoff.joint_dim(),
                found: self.matrix.nrows(),
            });
        }
        let repr = match &state.repr {
            StateRepr::Pure(v) => StateRepr::Pure(&self.matrix * v),
            StateRepr::Density(m) => StateRepr::Density(&self.matrix * m * self.matrix.adjoint()),
        };
        Ok(TwoModeState {
            cutoff: state.cutoff,
            repr,
        })
    }
}

/// A single-mode Kraus decomposition `{K_l}` with Σ K_l†K_l = 𝕀.
#[derive(Debug, Clone)]
pub struct KrausSet {
    cutoff: FockCutoff,
    ops: Vec<CMatrix>,
}

impl KrausSet {
    pub fn new(cutoff: FockCutoff, ops: Vec<CMatrix>) -> Result<Self> {
        let d = cutoff.dim();
        let mut sum = CMatrix::zeros(d, d);
        for k in &ops {
            if k.nrows() != d || k.ncols() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: k.nrows(),
                });
            }
            sum += k.adjoint() * k;
        }
        let residual = max_abs(&(sum - CMatrix::identity(d, d)));
        if residual > UNITARY_TOL {
            return Err(Error::NotTracePreserving { residual });
        }
        Ok(Self { cutoff, ops })
    }

    pub fn operators(&self) -> &[CMatrix] {
        &self.ops
    }

    /// ρ ↦ Σ_l (K_l ⊗ 𝕀) ρ (K_l ⊗ 𝕀)† with K_l acting on `mode`.
    pub fn apply(&self, state: &TwoModeState, mode: Mode) -> Result<TwoModeState> {
        self.cutoff.ensure_same(state.cutoff)?;
        let rho = state.density_matrix();
        let out = apply_local_channel(&self.ops, &rho, self.cutoff, mode);
        Ok(TwoModeState::density_unchecked(self.cutoff, out))
    }
}

/// Σ_l (K_l on `mode`) · m · (K_l on `mode`)† for an arbitrary (not necessarily
/// Hermitian) two-mode matrix `m`. Zero entries of each K_l are skipped.
pub(crate) fn apply_local_channel(
    ops: &[CMatrix],
    m: &CMatrix,
    cutoff: FockCutoff,
    mode: Mode,
) -> CMatrix {
    let dd = cutoff.joint_dim();
    let mut out = CMatrix::zeros(dd, dd);
    for k in ops {
        let left = left_mul_local(k, m, cutoff, mode);
        out += right_mul_local_adjoint(k, &left, cutoff, mode);
    }
    out
}

fn local_nonzeros(k: &CMatrix) -> Vec<(usize, usize, C64)> {
    let mut nz = Vec::new();
    for a in 0..k.nrows() {
        for b in 0..k.ncols() {
            let v = k[(a, b)];
            if v != ZERO {
                nz.push((a, b, v));
            }
        }
    }
    nz
}

/// (K on `mode`) · m
pub(crate) fn left_mul_local(k: &CMatrix, m: &CMatrix, cutoff: FockCutoff, mode: Mode) -> CMatrix {
    let d = cutoff.dim();
    let dd = cutoff.joint_dim();
    let mut out = CMatrix::zeros(dd, dd);
    for (a, b, v) in local_nonzeros(k) {
        for other in 0..d {
            let (row_out, row_in) = match mode {
                Mode::Signal => (cutoff.joint_index(a, other), cutoff.joint_index(b, other)),
                Mode::Idler => (cutoff.joint_index(other, a), cutoff.joint_index(other, b)),
            };
            for col in 0..dd {
                out[(row_out, col)] += v * m[(row_in, col)];
            }
        }
    }
    out
}

/// m · (K on `mode`)†
pub(crate) fn right_mul_local_adjoint(
    k: &CMatrix,
    m: &CMatrix,
    cutoff: FockCutoff,
    mode: Mode,
) -> CMatrix {
    let d = cutoff.dim();
    let dd = cutoff.joint_dim();
    let mut out = CMatrix::zeros(dd, dd);
    for (a, b, v) in local_nonzeros(k) {
        let vc = v.conj();
        for other in 0..d {
            let (col_out, col_in) = match mode {
                Mode::Signal => (cutoff.joint_index(a, other), cutoff.joint_index(b, other)),
                Mode::Idler => (cutoff.joint_index(other, a), cutoff.joint_index(other, b)),
            };
            for row in 0..dd {
                out[(row, col_out)] += m[(row, col_in)] * vc;
            }
        }
    }
    out
}

/// Kronecker product of two single-mode states; signal is `a`, idler is `b`.
pub fn tensor_states(a: &SingleModeState, b: &SingleModeState) -> Result<TwoModeState> {
    a.cutoff.ensure_same(b.cutoff)?;
    let repr = match (&a.repr, &b.repr) {
        (StateRepr::Pure(u), StateRepr::Pure(v)) => StateRepr::Pure(u.kronecker(v)),
        _ => StateRepr::Density(a.density_matrix().kronecker(&b.density_matrix())),
    };
    Ok(TwoModeState {
        cutoff: a.cutoff,
        repr,
    })
}

/// Kronecker product of two single-mode operators acting on signal (`a`) and idler (`b`).
pub fn tensor_operators(a: &ModeOperator, b: &ModeOperator) -> Result<ModeOperator> {
    a.cutoff.ensure_same(b.cutoff)?;
    if a.modes != 1 || b.modes != 1 {
        return Err(Error::DimensionMismatch {
            expected: a.cutoff.dim(),
            found: a.matrix.nrows().max(b.matrix.nrows()),
        });
    }
    let kind = if a.kind == b.kind {
        a.kind
    } else {
        OperatorKind::General
    };
    Ok(ModeOperator {
        cutoff: a.cutoff,
        modes: 2,
        kind,
        matrix: a.matrix.kronecker(&b.matrix),
    })
}

/// Traces out `traced` and returns the reduced state of the other mode.
pub fn partial_trace(state: &TwoModeState, traced: Mode) -> Result<SingleModeState> {
    let rho = state.density_matrix();
    let reduced = partial_trace_matrix(&rho, state.cutoff, traced)?;
    Ok(SingleModeState::density_unchecked(state.cutoff, reduced))
}

pub fn partial_trace_matrix(m: &CMatrix, cutoff: FockCutoff, traced: Mode) -> Result<CMatrix> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    check_len(m.nrows(), cutoff.joint_dim())?;
    let d = cutoff.dim();
    Ok(CMatrix::from_fn(d, d, |a, b| {
        (0..d)
            .map(|t| match traced {
                Mode::Idler => m[(cutoff.joint_index(a, t), cutoff.joint_index(b, t))],
                Mode::Signal => m[(cutoff.joint_index(t, a), cutoff.joint_index(t, b))],
            })
            .sum()
    }))
}

/// ⟨O⟩ for a Hermitian two-mode observable.
pub fn expectation(state: &TwoModeState, obs: &ModeOperator) -> Result<f64> {
    state.cutoff.ensure_same(obs.cutoff)?;
    if obs.modes != 2 {
        return Err(Error::DimensionMismatch {
            expected: state.cutoff.joint_dim(),
            found: obs.matrix.nrows(),
        });
    }
    let residual = hermitian_residual(&obs.matrix);
    if residual > HERMITIAN_TOL {
        return Err(Error::NotHermitian { residual });
    }
    let value = match &state.repr {
        StateRepr::Pure(v) => v.dotc(&(&obs.matrix * v)),
        StateRepr::Density(m) => (m * &obs.matrix).trace(),
    };
    let scale = value.re.abs().max(1.0);
    if value.im.abs() > 1e-10 * scale {
        return Err(Error::NotHermitian {
            residual: value.im.abs(),
        });
    }
    Ok(value.re)
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

pub fn hermitian_residual(m: &CMatrix) -> f64 {
    if m.nrows() != m.ncols() {
        return f64::INFINITY;
    }
    max_abs(&(m - m.adjoint()))
}

pub fn unitarity_residual(m: &CMatrix) -> f64 {
    let n = m.nrows();
    max_abs(&(m.adjoint() * m - CMatrix::identity(n, n)))
}

/// Eigenvalues of a Hermitian matrix in ascending order.
pub fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

fn validate_density(rho: &CMatrix) -> Result<()> {
    if rho.nrows() != rho.ncols() {
        return Err(Error::NotSquare {
            rows: rho.nrows(),
            cols: rho.ncols(),
        });
    }
    let residual = hermitian_residual(rho);
    if residual > HERMITIAN_TOL {
        return Err(Error::NotHermitian { residual });
    }
    let min_eigenvalue = hermitian_eigenvalues(rho).first().copied().unwrap_or(0.0);
    if min_eigenvalue < -PSD_TOL {
        return Err(Error::NotPositive { min_eigenvalue });
    }
    let tr = rho.trace().re;
    if !(tr > 0.0 && tr <= 1.0 + 1e-10) {
        return Err(Error::InvalidState(format!("trace {tr} outside (0, 1]")));
    }
    Ok(())
}

fn check_len(found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

fn check_norm(norm_sq: f64) -> Result<()> {
    if !(norm_sq > 0.0 && norm_sq <= 1.0 + 1e-12) {
        return Err(Error::InvalidState(format!(
            "squared norm {norm_sq} outside (0, 1]"
        )));
    }
    Ok(())
}
