//! Fitting the interferometer model to joint-count histograms, and
//! resampling-based uncertainty.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::detectors::{contract_diagonal, DetectorPovm};
use crate::error::{Error, Result};
use crate::fock::FockCutoff;
use crate::metrology::cfi_at;
use crate::optics::{mean_photons_from_z, InterferometerConfig, LossModel, NumberStatistics, SqueezingParams};
use crate::optimize::{nelder_mead, NelderMeadOptions};
use crate::sampling::{multinomial, seeded_rng};

/// Largest squeezing the fit will consider.
pub const Z_MAX: f64 = 0.9;

const MAX_POLISH_STEPS: usize = 20;

/// Joint detection counts `C_jk` recorded at a set of phase settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountHistogram {
    pub phases: Vec<f64>,
    pub trials_per_phase: u64,
    /// Number of signal and idler outcomes.
    pub shape: (usize, usize),
    /// `counts[phase][j * shape.1 + k]`
    pub counts: Vec<Vec<u64>>,
}

impl CountHistogram {
    pub fn new(phases: Vec<f64>, trials_per_phase: u64, shape: (usize, usize), counts: Vec<Vec<u64>>) -> Result<Self> {
        let h = Self {
            phases,
            trials_per_phase,
            shape,
            counts,
        };
        h.validate(false)?;
        Ok(h)
    }

    /// In strict mode every trial must be recorded.
    pub fn validate(&self, strict: bool) -> Result<()> {
        if self.phases.len() != self.counts.len() {
            return Err(Error::DimensionMismatch {
                expected: self.phases.len(),
                found: self.counts.len(),
            });
        }
        if let Some(&p) = self.phases.iter().find(|p| !p.is_finite()) {
            return Err(Error::param("phase", p, "phase must be finite"));
        }
        for (i, row) in self.counts.iter().enumerate() {
            if row.len() != self.shape.0 * self.shape.1 {
                return Err(Error::DimensionMismatch {
                    expected: self.shape.0 * self.shape.1,
                    found: row.len(),
                });
            }
            let recorded: u64 = row.iter().sum();
            if recorded > self.trials_per_phase {
                return Err(Error::InvalidData(format!(
                    "phase {i} records {recorded} events for {} trials",
                    self.trials_per_phase
                )));
            }
            if strict && recorded != self.trials_per_phase {
                return Err(Error::InvalidData(format!(
                    "phase {i} leaves {} trials unrecorded",
                    self.trials_per_phase - recorded
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self, phase: usize, j: usize, k: usize) -> u64 {
        self.counts[phase][j * self.shape.1 + k]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn distinct_phases(&self) -> usize {
        let mut p: Vec<f64> = self.phases.iter().map(|p| p.rem_euclid(std::f64::consts::TAU)).collect();
        p.sort_by(f64::total_cmp);
        p.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        p.len()
    }

    /// Same frequencies with every count and the trial number multiplied.
    pub fn scaled(&self, factor: u64) -> Self {
        Self {
            phases: self.phases.clone(),
            trials_per_phase: self.trials_per_phase * factor,
            shape: self.shape,
            counts: self
                .counts
                .iter()
                .map(|r| r.iter().map(|c| c * factor).collect())
                .collect(),
        }
    }

    /// Long-format CSV: provenance comments, `# trials_per_phase=N`, then
    /// `phase_rad,j,k,count` rows for every cell.
    pub fn write_csv<W: Write>(&self, mut w: W, provenance: &str) -> Result<()> {
        for line in provenance.lines() {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "# trials_per_phase={}", self.trials_per_phase)?;
        writeln!(w, "phase_rad,j,k,count")?;
        for (phase, row) in self.phases.iter().zip(&self.counts) {
            for j in 0..self.shape.0 {
                for k in 0..self.shape.1 {
                    writeln!(w, "{phase:.12e},{j},{k},{}", row[j * self.shape.1 + k])?;
                }
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, provenance: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f, provenance)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut text = String::new();
        let mut trials = None;
        for line in reader.lines() {
            let line = line?;
            if let Some(rest) = line.trim().strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("trials_per_phase=") {
                    trials = Some(v.trim().parse::<u64>().map_err(|e| {
                        Error::config("trials_per_phase", format!("cannot parse `{}`: {e}", v.trim()))
                    })?);
                }
                continue;
            }
            text.push_str(&line);
            text.push('\n');
        }
        let trials = trials.ok_or_else(|| {
            Error::config("trials_per_phase", "missing `# trials_per_phase=N` header line")
        })?;

        #[derive(Deserialize)]
        struct Row {
            phase_rad: f64,
            j: usize,
            k: usize,
            count: u64,
        }
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut cells: BTreeMap<u64, BTreeMap<(usize, usize), u64>> = BTreeMap::new();
        let mut order = Vec::new();
        let (mut nj, mut nk) = (0, 0);
        for rec in rdr.deserialize() {
            let r: Row = rec?;
            if !r.phase_rad.is_finite() {
                return Err(Error::InvalidData("non-finite phase".into()));
            }
            let key = r.phase_rad.to_bits();
            if !cells.contains_key(&key) {
                order.push(r.phase_rad);
            }
            *cells.entry(key).or_default().entry((r.j, r.k)).or_default() += r.count;
            nj = nj.max(r.j + 1);
            nk = nk.max(r.k + 1);
        }
        if order.is_empty() {
            return Err(Error::InvalidData("count file has no rows".into()));
        }
        let counts = order
            .iter()
            .map(|p| {
                let mut row = vec![0; nj * nk];
                for (&(j, k), &c) in &cells[&p.to_bits()] {
                    row[j * nk + k] = c;
                }
                row
            })
            .collect();
        Self::new(order, trials, (nj, nk), counts)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Physical model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub z: f64,
    pub eta_p_s: f64,
    pub eta_p_i: f64,
    pub eta_d_s: f64,
    pub eta_d_i: f64,
}

impl ModelParams {
    pub fn uniform(z: f64, eta: f64) -> Self {
        Self {
            z,
            eta_p_s: eta,
            eta_p_i: eta,
            eta_d_s: eta,
            eta_d_i: eta,
        }
    }

    pub fn from_config(config: &InterferometerConfig) -> Self {
        Self {
            z: config.squeezing.z(),
            eta_p_s: config.loss.eta_p_s,
            eta_p_i: config.loss.eta_p_i,
            eta_d_s: config.loss.eta_d_s,
            eta_d_i: config.loss.eta_d_i,
        }
    }

    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::Z => self.z,
            Param::EtaPS => self.eta_p_s,
            Param::EtaPI => self.eta_p_i,
            Param::EtaDS => self.eta_d_s,
            Param::EtaDI => self.eta_d_i,
        }
    }

    pub fn set(&mut self, p: Param, v: f64) {
        match p {
            Param::Z => self.z = v,
            Param::EtaPS => self.eta_p_s = v,
            Param::EtaPI => self.eta_p_i = v,
            Param::EtaDS => self.eta_d_s = v,
            Param::EtaDI => self.eta_d_i = v,
        }
    }

    pub fn to_config(&self, cutoff: FockCutoff) -> Result<InterferometerConfig> {
        let loss = LossModel::new(self.eta_p_s, self.eta_p_i, self.eta_d_s, self.eta_d_i)?;
        Ok(InterferometerConfig::new(SqueezingParams::new(self.z)?, loss, 0.0, cutoff))
    }

    pub fn mean_photons(&self) -> f64 {
        mean_photons_from_z(self.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    Z,
    EtaPS,
    EtaPI,
    EtaDS,
    EtaDI,
}

impl Param {
    pub fn name(self) -> &'static str {
        match self {
            Param::Z => "z",
            Param::EtaPS => "eta_p_s",
            Param::EtaPI => "eta_p_i",
            Param::EtaDS => "eta_d_s",
            Param::EtaDI => "eta_d_i",
        }
    }

    fn upper(self) -> f64 {
        match self {
            Param::Z => Z_MAX,
            _ => 1.0,
        }
    }

    /// Unbounded search coordinate: logit of the parameter over its range.
    fn to_search(self, v: f64) -> f64 {
        let x = (v / self.upper()).clamp(1e-12, 1.0 - 1e-12);
        (x / (1.0 - x)).ln()
    }

    fn natural(self, u: f64) -> f64 {
        self.upper() / (1.0 + (-u).exp())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub free: Vec<Param>,
    /// Starting point; parameters not in `free` stay at these values.
    pub initial: ModelParams,
    pub cutoff: FockCutoff,
    /// Keep the single-photon cells `(0,1)` and `(1,0)` in the likelihood.
    pub include_single_photon: bool,
    pub starts: usize,
    /// Edge of the initial simplex in logit coordinates.
    pub simplex_step: f64,
    /// Simplex iterations allowed per start.
    pub max_iterations: u64,
    /// Seeds the random multi-start points.
    pub seed: u64,
}

impl FitOptions {
    /// Fits `z` and both preparation efficiencies with the detection
    /// efficiencies held at their values in `initial`.
    pub fn supported(initial: ModelParams, cutoff: FockCutoff, seed: u64) -> Self {
        Self {
            free: vec![Param::Z, Param::EtaPS, Param::EtaPI],
            initial,
            cutoff,
            include_single_photon: false,
            starts: 8,
            simplex_step: 0.5,
            max_iterations: 5_000,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub n_bar_hat: f64,
    pub free: Vec<Param>,
    pub parameter_names: Vec<String>,
    /// Covariance of the free parameters, in `free` order; absent when the
    /// observed information is singular.
    pub covariance: Option<Vec<Vec<f64>>>,
    pub std_errors: Option<Vec<f64>>,
    pub log_likelihood: f64,
    /// Likelihood-ratio statistic against the saturated model.
    pub g_statistic: f64,
    pub degrees_of_freedom: i64,
    pub converged: bool,
    pub identifiable: bool,
    pub at_boundary: Vec<String>,
    pub warnings: Vec<String>,
    pub seed: u64,
}

impl FitResult {
    pub fn std_error(&self, p: Param) -> Option<f64> {
        let i = self.free.iter().position(|&q| q == p)?;
        self.std_errors.as_ref().map(|s| s[i])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Cells entering the likelihood, per phase.
fn cell_mask(shape: (usize, usize), include_single_photon: bool) -> Vec<bool> {
    (0..shape.0 * shape.1)
        .map(|c| {
            let (j, k) = (c / shape.1, c % shape.1);
            include_single_photon || !matches!((j, k), (0, 1) | (1, 0))
        })
        .collect()
}

/// Model outcome probabilities at every phase of the histogram.
pub fn model_probabilities(
    params: &ModelParams,
    cutoff: FockCutoff,
    phases: &[f64],
    povm_s: &DetectorPovm,
    povm_i: &DetectorPovm,
) -> Result<Vec<Vec<f64>>> {
    let stats = NumberStatistics::new(&params.to_config(cutoff)?)?;
    let d = cutoff.dim();
    phases
        .iter()
        .map(|&t| {
            let (diag, _) = stats.distribution_at(t);
            contract_diagonal(&diag, d, povm_s, povm_i)
        })
        .collect()
}

/// Multinomial log-likelihood over the included cells, conditioned on the
/// event landing in them.
fn conditional_ll(hist: &CountHistogram, probs: &[Vec<f64>], mask: &[bool]) -> f64 {
    let mut ll = 0.0;
    for (row, p) in hist.counts.iter().zip(probs) {
        let mass: f64 = p.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
        for ((&n, &pc), &m) in row.iter().zip(p).zip(mask) {
            if m && n > 0 {
                ll += n as f64 * (pc / mass).ln();
            }
        }
    }
    ll
}

fn check_povm_shape(hist: &CountHistogram, povm_s: &DetectorPovm, povm_i: &DetectorPovm) -> Result<()> {
    if hist.shape != (povm_s.n_outcomes(), povm_i.n_outcomes()) {
        return Err(Error::InvalidData(format!(
            "histogram has {}x{} outcomes but the detectors give {}x{}",
            hist.shape.0,
            hist.shape.1,
            povm_s.n_outcomes(),
            povm_i.n_outcomes()
        )));
    }
    Ok(())
}

/// Log-likelihood of the histogram under fixed parameters.
pub fn log_likelihood(
    hist: &CountHistogram,
    params: &ModelParams,
    povm_s: &DetectorPovm,
    povm_i: &DetectorPovm,
    options: &FitOptions,
) -> Result<f64> {
    check_povm_shape(hist, povm_s, povm_i)?;
    let probs = model_probabilities(params, options.cutoff, &hist.phases, povm_s, povm_i)?;
    Ok(conditional_ll(hist, &probs, &cell_mask(hist.shape, options.include_single_photon)))
}

/// Maximum-likelihood fit of the free parameters.
///
/// Each start runs a Nelder–Mead search in logit coordinates; start 0 is
/// `options.initial`, the others are drawn from the seeded generator. The
/// covariance is the inverse of the observed information, from central
/// differences of the log-likelihood at the optimum.
pub fn fit_model(
    hist: &CountHistogram,
    povm_s: &DetectorPovm,
    povm_i: &DetectorPovm,
    options: &FitOptions,
) -> Result<FitResult> {
    check_povm_shape(hist, povm_s, povm_i)?;
    hist.validate(false)?;
    if hist.total() == 0 {
        return Err(Error::InvalidData("histogram has no counts".into()));
    }
    if options.free.is_empty() {
        return Err(Error::config("free", "no free parameters"));
    }
    let mask = cell_mask(hist.shape, options.include_single_photon);
    let free = options.free.clone();
    let mut warnings = Vec::new();
    if hist.distinct_phases() < 2 && free.len() > 1 {
        let msg = format!(
            "{} free parameters but only {} distinct phase setting(s); the fit is not identifiable",
            free.len(),
            hist.distinct_phases()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let n_events: u64 = hist
        .counts
        .iter()
        .flat_map(|r| r.iter().zip(&mask).filter(|(_, &m)| m).map(|(c, _)| *c))
        .sum();
    if n_events == 0 {
        return Err(Error::InvalidData("no counts fall in the fitted cells".into()));
    }
    let ll_at = |p: &ModelParams| -> f64 {
        match model_probabilities(p, options.cutoff, &hist.phases, povm_s, povm_i) {
            Ok(probs) => conditional_ll(hist, &probs, &mask),
            Err(_) => f64::NAN,
        }
    };
    let params_at = |u: &[f64]| {
        let mut p = options.initial;
        for (&q, &v) in free.iter().zip(u) {
            p.set(q, q.natural(v));
        }
        p
    };
    // per-event scale keeps the simplex tolerance meaningful for any sample size
    let neg_ll = |u: &[f64]| -ll_at(&params_at(u)) / n_events as f64;

    let starts: Vec<Vec<f64>> = (0..options.starts.max(1))
        .map(|s| {
            if s == 0 {
                free.iter().map(|&q| q.to_search(options.initial.get(q))).collect()
            } else {
                let mut rng = seeded_rng(options.seed, s as u64);
                free.iter()
                    .map(|&q| {
                        let v = match q {
                            Param::Z => rng.random_range(0.01..0.5),
                            _ => rng.random_range(0.3..0.99),
                        };
                        q.to_search(v)
                    })
                    .collect()
            }
        })
        .collect();
    let nm = NelderMeadOptions {
        sd_tol: 1e-14,
        initial_step: options.simplex_step,
        max_iters: options.max_iterations,
    };
    let runs: Vec<_> = starts.par_iter().map(|x0| nelder_mead(neg_ll, x0, nm)).collect();
    let best = runs
        .iter()
        .min_by(|a, b| a.f.total_cmp(&b.f))
        .expect("at least one start");
    if !runs.iter().any(|r| r.converged) {
        return Err(Error::NonConvergence(format!(
            "none of {} simplex searches converged",
            runs.len()
        )));
    }
    if !best.converged {
        warnings.push("best start stopped at the iteration limit".into());
    }

    // Newton polish in natural coordinates
    let with_free = |base: &ModelParams, x: &[f64]| {
        let mut p = *base;
        for (&q, &v) in free.iter().zip(x) {
            p.set(q, v);
        }
        p
    };
    let mut params = params_at(&best.x);
    let mut ll = ll_at(&params);
    let mut derivs = None;
    for _ in 0..MAX_POLISH_STEPS {
        let x: Vec<f64> = free.iter().map(|&q| params.get(q)).collect();
        let f = |y: &[f64]| {
            if free.iter().zip(y).all(|(&q, &v)| v > 0.0 && v < q.upper()) {
                ll_at(&with_free(&params, y))
            } else {
                f64::NAN
            }
        };
        let Some((grad, info)) = local_derivatives(&f, &x, &free) else {
            derivs = None;
            break;
        };
        let step = solve_spd(&info, &grad);
        derivs = Some(info);
        let Some(step) = step else { break };
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-6 {
            let y: Vec<f64> = x.iter().zip(&step).map(|(a, d)| a + t * d).collect();
            let v = f(&y);
            if v.is_finite() && v >= ll {
                moved = y != x;
                params = with_free(&params, &y);
                ll = v;
                break;
            }
            t *= 0.5;
        }
        let small = x
            .iter()
            .zip(&step)
            .all(|(a, d)| (t * d).abs() <= 1e-12 * a.abs().max(1e-6));
        if !moved || small {
            break;
        }
    }
    // the polished point can move; refresh the curvature there
    let x_hat: Vec<f64> = free.iter().map(|&q| params.get(q)).collect();
    let f_hat = |y: &[f64]| {
        if free.iter().zip(y).all(|(&q, &v)| v > 0.0 && v < q.upper()) {
            ll_at(&with_free(&params, y))
        } else {
            f64::NAN
        }
    };
    if derivs.is_some() {
        derivs = local_derivatives(&f_hat, &x_hat, &free).map(|(_, info)| info);
    }

    let mut at_boundary = Vec::new();
    for &q in &free {
        let v = params.get(q);
        let tol = 1e-3 * q.upper();
        if v < tol || v > q.upper() - tol {
            at_boundary.push(q.name().to_string());
        }
    }
    if !at_boundary.is_empty() {
        let msg = format!("estimate at the parameter boundary: {}", at_boundary.join(", "));
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let covariance = derivs.as_deref().and_then(invert_spd);
    let identifiable = covariance.is_some();
    if !identifiable {
        let msg = "observed information is singular; free parameters are not jointly identifiable".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let std_errors = covariance
        .as_ref()
        .map(|c| (0..c.len()).map(|i| c[i][i].max(0.0).sqrt()).collect());

    // G statistic against the saturated model over the included cells
    let probs = model_probabilities(&params, options.cutoff, &hist.phases, povm_s, povm_i)?;
    let mut g = 0.0;
    let mut cells = 0i64;
    for (row, p) in hist.counts.iter().zip(&probs) {
        let n_incl: u64 = row.iter().zip(&mask).filter(|(_, &m)| m).map(|(c, _)| c).sum();
        let mass: f64 = p.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
        for ((&n, &pc), &m) in row.iter().zip(p).zip(&mask) {
            if !m {
                continue;
            }
            if pc > 0.0 {
                cells += 1;
            }
            if n > 0 {
                g += 2.0 * n as f64 * (n as f64 / (n_incl as f64 * pc / mass)).ln();
            }
        }
        cells -= 1;
    }

    Ok(FitResult {
        params,
        n_bar_hat: params.mean_photons(),
        parameter_names: free.iter().map(|q| q.name().to_string()).collect(),
        free,
        covariance,
        std_errors,
        log_likelihood: ll,
        g_statistic: g,
        degrees_of_freedom: cells - options.free.len() as i64,
        converged: best.converged,
        identifiable,
        at_boundary,
        warnings,
        seed: options.seed,
    })
}

/// Gradient and negative Hessian of `f` at `x` by central differences,
/// with steps kept inside each parameter's range.
fn local_derivatives<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], free: &[Param]) -> Option<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = x.len();
    let h: Vec<f64> = x
        .iter()
        .zip(free)
        .map(|(&v, &q)| {
            let room = v.min(q.upper() - v);
            (1e-4 * v.abs().max(1e-3)).min(0.5 * room)
        })
        .collect();
    if h.iter().any(|&s| s.is_nan() || s <= 0.0) {
        return None;
    }
    let eval = |d: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(i, s) in d {
            y[i] += s;
        }
        f(&y)
    };
    let f0 = f(x);
    let mut grad = vec![0.0; n];
    let mut info = vec![vec![0.0; n]; n];
    for i in 0..n {
        let (up, down) = (eval(&[(i, h[i])]), eval(&[(i, -h[i])]));
        grad[i] = (up - down) / (2.0 * h[i]);
        info[i][i] = -(up - 2.0 * f0 + down) / (h[i] * h[i]);
        for j in 0..i {
            let d = (eval(&[(i, h[i]), (j, h[j])]) - eval(&[(i, h[i]), (j, -h[j])]) - eval(&[(i, -h[i]), (j, h[j])])
                + eval(&[(i, -h[i]), (j, -h[j])]))
                / (4.0 * h[i] * h[j]);
            info[i][j] = -d;
            info[j][i] = -d;
        }
    }
    let finite = grad.iter().chain(info.iter().flatten()).all(|v| v.is_finite());
    finite.then_some((grad, info))
}

fn solve_spd(m: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = m.len();
    let mat = nalgebra::DMatrix::from_fn(n, n, |i, j| m[i][j]);
    let chol = mat.cholesky()?;
    Some(chol.solve(&nalgebra::DVector::from_column_slice(b)).iter().copied().collect())
}

fn invert_spd(m: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = m.len();
    let mat = nalgebra::DMatrix::from_fn(n, n, |i, j| m[i][j]);
    let eig = mat.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min.is_nan() || min <= 1e-10 * max {
        return None;
    }
    let inv = mat.cholesky()?.inverse();
    Some((0..n).map(|i| (0..n).map(|j| inv[(i, j)]).collect()).collect())
}

/// Draws a histogram from the model at the given phases.
pub fn simulate_counts(
    params: &ModelParams,
    cutoff: FockCutoff,
    phases: &[f64],
    trials_per_phase: u64,
    povm_s: &DetectorPovm,
    povm_i: &DetectorPovm,
    seed: u64,
) -> Result<CountHistogram> {
    let probs = model_probabilities(params, cutoff, phases, povm_s, povm_i)?;
    let counts = probs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            // truncation deficit is folded back by renormalizing
            let total: f64 = p.iter().sum();
            let p: Vec<f64> = p.iter().map(|v| v / total).collect();
            multinomial(&mut seeded_rng(seed, i as u64), trials_per_phase, &p)
        })
        .collect();
    CountHistogram::new(
        phases.to_vec(),
        trials_per_phase,
        (povm_s.n_outcomes(), povm_i.n_outcomes()),
        counts,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapBand {
    pub level: f64,
    pub resamples: usize,
    pub failed_resamples: usize,
    pub seed: u64,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BootstrapBand {
    pub fn widths(&self) -> Vec<f64> {
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).collect()
    }

    /// CSV with `#` provenance lines and columns `index,label,estimate,lower,upper`.
    pub fn write_csv<W: Write>(&self, mut w: W, labels: &[f64], provenance: &str) -> Result<()> {
        for line in provenance.lines() {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "index,phase,estimate,lower,upper")?;
        for i in 0..self.estimate.len() {
            let label = labels.get(i).map(|v| format!("{v:.12e}")).unwrap_or_default();
            writeln!(
                w,
                "{i},{label},{:.12e},{:.12e},{:.12e}",
                self.estimate[i], self.lower[i], self.upper[i]
            )?;
        }
        Ok(())
    }
}

/// Multinomial resample of every phase with the same number of trials;
/// unrecorded trials form their own category.
pub fn resample_histogram<R: Rng + ?Sized>(hist: &CountHistogram, rng: &mut R) -> CountHistogram {
    let n = hist.trials_per_phase;
    let counts = hist
        .counts
        .iter()
        .map(|row| {
            if n == 0 {
                return row.clone();
            }
            let mut p: Vec<f64> = row.iter().map(|&c| c as f64 / n as f64).collect();
            let recorded: u64 = row.iter().sum();
            p.push((n - recorded) as f64 / n as f64);
            let mut draw = multinomial(rng, n, &p);
            draw.pop();
            draw
        })
        .collect();
    CountHistogram {
        phases: hist.phases.clone(),
        trials_per_phase: n,
        shape: hist.shape,
        counts,
    }
}

/// Percentile bootstrap band for a vector-valued statistic.
///
/// Resample `r` uses the substream `r + 1` of `seed`, so the band does not
/// depend on thread scheduling. Resamples whose statistic fails are counted
/// and skipped; more than 10% failures is an error.
pub fn bootstrap_ci<F>(hist: &CountHistogram, resamples: usize, level: f64, seed: u64, statistic: F) -> Result<BootstrapBand>
where
    F: Fn(&CountHistogram) -> Result<Vec<f64>> + Sync,
{
    if resamples < 100 {
        return Err(Error::config("resamples", format!("{resamples} resamples; at least 100 are required")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::param("level", level, "confidence level must lie in (0, 1)"));
    }
    let estimate = statistic(hist)?;
    let draws: Vec<Option<Vec<f64>>> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = seeded_rng(seed, r as u64 + 1);
            let sample = resample_histogram(hist, &mut rng);
            statistic(&sample).ok().filter(|v| v.len() == estimate.len())
        })
        .collect();
    let ok: Vec<Vec<f64>> = draws.into_iter().flatten().collect();
    let failed = resamples - ok.len();
    if failed * 10 > resamples {
        return Err(Error::NonConvergence(format!("{failed} of {resamples} bootstrap resamples failed")));
    }
    let alpha = 0.5 * (1.0 - level);
    let mut lower = Vec::with_capacity(estimate.len());
    let mut upper = Vec::with_capacity(estimate.len());
    for i in 0..estimate.len() {
        let mut col: Vec<f64> = ok.iter().map(|v| v[i]).collect();
        col.sort_by(f64::total_cmp);
        lower.push(quantile_sorted(&col, alpha));
        upper.push(quantile_sorted(&col, 1.0 - alpha));
    }
    Ok(BootstrapBand {
        level,
        resamples,
        failed_resamples: failed,
        seed,
        estimate,
        lower,
        upper,
    })
}

/// Bootstrap band for the classical Fisher information over `grid`,
/// propagated through the model fit.
///
/// Each resample is refitted with a single simplex start at the point
/// estimate, then the CFI of the refitted model is evaluated on the grid.
#[allow(clippy::too_many_arguments)]
pub fn cfi_band(
    hist: &CountHistogram,
    povm_s: &DetectorPovm,
    povm_i: &DetectorPovm,
    options: &FitOptions,
    grid: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(FitResult, BootstrapBand)> {
    let point = fit_model(hist, povm_s, povm_i, options)?;
    let refit = FitOptions {
        initial: point.params,
        starts: 1,
        simplex_step: 0.05,
        ..options.clone()
    };
    let band = bootstrap_ci(hist, resamples, level, seed, |h| {
        let params = if std::ptr::eq(h, hist) {
            point.params
        } else {
            fit_model(h, povm_s, povm_i, &refit)?.params
        };
        cfi_curve(&params, options.cutoff, grid, povm_s, povm_i)
    })?;
    Ok((point, band))
}

/// CFI of the model at each phase of `grid`.
pub fn cfi_curve(
    params: &ModelParams,
    cutoff: FockCutoff,
    grid: &[f64],
    povm_s: &DetectorPovm,
    povm_i: &DetectorPovm,
) -> Result<Vec<f64>> {
    let stats = NumberStatistics::new(&params.to_config(cutoff)?)?;
    grid.iter().map(|&t| cfi_at(&stats, povm_s, povm_i, t)).collect()
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnlEstimate {
    pub snl: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

/// SNL `n̄(ẑ)` with a normal interval from the delta method,
/// `σ_n̄ = |dn̄/dz| σ_z` with `dn̄/dz = 4z/(1-z²)²`. The lower end is
/// clamped at zero.
pub fn snl_with_uncertainty(fit: &FitResult, level: f64) -> Result<SnlEstimate> {
    let sigma_z = if fit.free.contains(&Param::Z) {
        fit.std_error(Param::Z)
            .ok_or_else(|| Error::Identifiability("fit has no covariance for z".into()))?
    } else {
        0.0
    };
    snl_interval(fit.params.z, sigma_z, level)
}

/// Delta-method SNL interval from `z` and its standard error.
pub fn snl_interval(z: f64, sigma_z: f64, level: f64) -> Result<SnlEstimate> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::param("level", level, "confidence level must lie in (0, 1)"));
    }
    let snl = mean_photons_from_z(z);
    let slope = 4.0 * z / (1.0 - z * z).powi(2);
    let se = slope.abs() * sigma_z;
    let q = Normal::standard().inverse_cdf(0.5 + 0.5 * level);
    Ok(SnlEstimate {
        snl,
        std_error: se,
        lower: (snl - q * se).max(0.0),
        upper: snl + q * se,
        level,
    })
}

/// Delta-method interval directly from `n̄` and its standard error.
pub fn snl_interval_from_mean(n_bar: f64, sigma: f64, level: f64) -> Result<SnlEstimate> {
    let z = SqueezingParams::from_mean_photons(n_bar)?.z();
    let slope = 4.0 * z / (1.0 - z * z).powi(2);
    snl_interval(z, if slope > 0.0 { sigma / slope } else { 0.0 }, level)
}
