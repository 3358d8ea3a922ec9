//! Command-line front end: a JSON run configuration, flag overrides, and one
//! function per subcommand. Every file written carries the resolved
//! configuration, as a `provenance` object in JSON or `#` lines in CSV.

use std::ffi::OsString;
use std::f64::consts::{FRAC_PI_4, PI, TAU};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::detectors::{
    coherent_probe_matrix, group_probe_records, read_probe_csv, tomography_mle, DetectorPovm, ResponseMatrix,
    TomographyOptions,
};
use crate::error::{Error, Result};
use crate::fock::FockCutoff;
use crate::inference::{
    cfi_band, fit_model, simulate_counts, snl_with_uncertainty, CountHistogram, FitOptions, ModelParams, Param,
};
use crate::metrology::{
    config_hash, max_cfi, max_qfi, max_tolerable_loss, pnr_click_ratio, sub_snl_fraction, sweep_fisher, FisherKind,
    MaxSearch, QfiMode,
};
use crate::optics::{
    InterferometerConfig, LossModel, NumberStatistics, PhaseConvention, PreparedInterferometer, SqueezingParams,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IDENTIFIABILITY: i32 = 3;
pub const EXIT_NON_CONVERGENCE: i32 = 4;

const TOOL: &str = "tmsv-metro";

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::InvalidParameter { .. } | Error::Io(_) | Error::Json(_) | Error::Csv(_) => {
            EXIT_CONFIG
        }
        Error::Identifiability(_) => EXIT_IDENTIFIABILITY,
        Error::NonConvergence(_) => EXIT_NON_CONVERGENCE,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Squeezing amplitude; give this or `nbar`.
    pub z: Option<f64>,
    /// Mean generated photon number; give this or `z`.
    pub nbar: Option<f64>,
    pub eta_p_s: f64,
    pub eta_p_i: f64,
    pub eta_d_s: f64,
    pub eta_d_i: f64,
    pub cutoff: usize,
    /// Highest resolved photon number of the ideal PNR detector; defaults to the cutoff.
    pub pnr_max: Option<usize>,
    /// `ideal-pnr`, `click` or `povm-file:PATH`.
    pub detector: String,
    pub phases: PhaseGridConfig,
    /// Phase inputs (grid ends, robustness phase) are in degrees.
    pub degrees: bool,
    pub qfi: QfiMode,
    pub seed: Option<u64>,
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
    pub loss_scan: LossScanConfig,
    pub tomography: TomographyConfig,
    pub fit: FitConfig,
    pub bootstrap: BootstrapConfig,
    pub simulate: SimulateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            z: None,
            nbar: None,
            eta_p_s: 1.0,
            eta_p_i: 1.0,
            eta_d_s: 1.0,
            eta_d_i: 1.0,
            cutoff: 10,
            pnr_max: None,
            detector: "ideal-pnr".into(),
            phases: PhaseGridConfig::default(),
            degrees: false,
            qfi: QfiMode::Both,
            seed: None,
            threads: None,
            output_dir: PathBuf::from("."),
            loss_scan: LossScanConfig::default(),
            tomography: TomographyConfig::default(),
            fit: FitConfig::default(),
            bootstrap: BootstrapConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

/// Uniform grid of `points` phases on `[start, stop)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseGridConfig {
    pub points: usize,
    pub start: f64,
    pub stop: f64,
}

impl Default for PhaseGridConfig {
    fn default() -> Self {
        Self {
            points: 2048,
            start: 0.0,
            stop: TAU,
        }
    }
}

impl PhaseGridConfig {
    pub fn grid(&self, points: usize) -> Vec<f64> {
        let step = (self.stop - self.start) / points as f64;
        (0..points).map(|i| self.start + step * i as f64).collect()
    }
}

/// Loss axis of the scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LossAxis {
    /// Every fictitious beam splitter at `√(1 - L)`.
    Symmetric,
    /// The configured efficiencies, times an extra `1 - L` at preparation in both arms.
    AddedSample,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossScanConfig {
    pub losses: Vec<f64>,
    pub nbar_grid: Vec<f64>,
    pub loss_model: LossAxis,
    /// Phase at which the loss thresholds are evaluated.
    pub robustness_phase: f64,
    pub coarse_points: usize,
    pub tol: f64,
}

impl Default for LossScanConfig {
    fn default() -> Self {
        Self {
            losses: (0..=10).map(|i| 0.05 * i as f64).collect(),
            nbar_grid: vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0],
            loss_model: LossAxis::Symmetric,
            robustness_phase: FRAC_PI_4,
            coarse_points: 256,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TomographyConfig {
    pub probes: Option<PathBuf>,
    pub kmax: usize,
    pub n_outcomes: Option<usize>,
    pub allow_rank_deficient: bool,
}

impl Default for TomographyConfig {
    fn default() -> Self {
        Self {
            probes: None,
            kmax: 9,
            n_outcomes: None,
            allow_rank_deficient: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub counts: Option<PathBuf>,
    pub free: Vec<Param>,
    pub include_single_photon: bool,
    pub starts: usize,
    /// Reject histograms with unrecorded trials.
    pub strict: bool,
    pub level: f64,
    pub max_iterations: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            counts: None,
            free: vec![Param::Z, Param::EtaPS, Param::EtaPI],
            include_single_photon: false,
            starts: 8,
            strict: false,
            level: 0.95,
            max_iterations: 5_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
    /// Phases of the CFI band, spread over the configured phase range.
    pub band_points: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 200,
            level: 0.95,
            band_points: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub trials: u64,
    /// Number of phase settings, spread over the configured phase range.
    pub phases: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            trials: 1_000_000,
            phases: 20,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = TOOL, version, about = "Two-mode squeezed vacuum phase estimation with photon-number-resolving detectors")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub z: Option<f64>,
    #[arg(long, global = true)]
    pub nbar: Option<f64>,
    /// Preparation efficiencies: one value for both arms, or `signal,idler`.
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..=2)]
    pub eta_p: Option<Vec<f64>>,
    /// Detection efficiencies: one value for both arms, or `signal,idler`.
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..=2)]
    pub eta_d: Option<Vec<f64>>,
    /// Symmetric total loss per arm, split evenly between preparation and detection.
    #[arg(long, global = true, conflicts_with_all = ["eta_p", "eta_d"])]
    pub loss: Option<f64>,
    #[arg(long, global = true)]
    pub cutoff: Option<usize>,
    #[arg(long, global = true)]
    pub pnr_max: Option<usize>,
    /// `ideal-pnr`, `click` or `povm-file:PATH`.
    #[arg(long, global = true)]
    pub detector: Option<String>,
    /// Number of phase grid points.
    #[arg(long, global = true)]
    pub phases: Option<usize>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub phase_start: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub phase_stop: Option<f64>,
    /// Read phase inputs in degrees.
    #[arg(long, global = true)]
    pub degrees: bool,
    #[arg(long, global = true, value_parser = parse_qfi)]
    pub qfi: Option<QfiMode>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, short = 'o', global = true)]
    pub out: Option<PathBuf>,
}

fn parse_qfi(s: &str) -> std::result::Result<QfiMode, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("`{s}` is not one of none, lossy, both"))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fisher information over the phase grid: fisher.csv and fisher.json.
    Sweep,
    /// FI against loss and PNR/click comparisons against mean photon number.
    LossScan {
        /// Comma-separated loss values.
        #[arg(long, value_delimiter = ',')]
        losses: Option<Vec<f64>>,
        /// Comma-separated mean photon numbers.
        #[arg(long, value_delimiter = ',')]
        nbar_grid: Option<Vec<f64>>,
        #[arg(long, value_enum)]
        loss_model: Option<LossAxis>,
        #[arg(long, allow_hyphen_values = true)]
        robustness_phase: Option<f64>,
    },
    /// Maximum-likelihood POVM from coherent-probe counts: povm.json.
    Tomography {
        /// CSV with columns `alpha_sq,outcome,count`.
        probes: Option<PathBuf>,
        #[arg(long)]
        kmax: Option<usize>,
        #[arg(long)]
        n_outcomes: Option<usize>,
        #[arg(long)]
        allow_rank_deficient: bool,
    },
    /// Fit z and preparation efficiencies to a count histogram: fit.json.
    Fit {
        /// Counts CSV with a `# trials_per_phase=N` line.
        counts: Option<PathBuf>,
        #[command(flatten)]
        fit: FitFlags,
    },
    /// Bootstrap band on the CFI curve of the fitted model: band.csv.
    Bootstrap {
        counts: Option<PathBuf>,
        #[command(flatten)]
        fit: FitFlags,
        #[arg(long)]
        resamples: Option<usize>,
        #[arg(long)]
        level: Option<f64>,
        #[arg(long)]
        band_points: Option<usize>,
    },
    /// Synthetic count histogram from the configured model: counts.csv.
    SimulateCounts {
        #[arg(long)]
        trials: Option<u64>,
        /// Number of phase settings.
        #[arg(long)]
        count_phases: Option<usize>,
    },
}

#[derive(Debug, Default, Args)]
pub struct FitFlags {
    /// Comma-separated free parameters (z, eta_p_s, eta_p_i, eta_d_s, eta_d_i).
    #[arg(long, value_delimiter = ',', value_parser = parse_param)]
    pub free: Option<Vec<Param>>,
    /// Keep the (0,1) and (1,0) cells in the likelihood.
    #[arg(long)]
    pub include_single_photon: bool,
    #[arg(long)]
    pub starts: Option<usize>,
    #[arg(long)]
    pub strict: bool,
    /// Simplex iterations allowed per start.
    #[arg(long)]
    pub max_iterations: Option<u64>,
}

fn parse_param(s: &str) -> std::result::Result<Param, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown parameter `{s}`"))
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Sweep => "sweep",
            Command::LossScan { .. } => "loss-scan",
            Command::Tomography { .. } => "tomography",
            Command::Fit { .. } => "fit",
            Command::Bootstrap { .. } => "bootstrap",
            Command::SimulateCounts { .. } => "simulate-counts",
        }
    }
}

fn pair(field: &str, v: &[f64]) -> Result<(f64, f64)> {
    match v {
        [a] => Ok((*a, *a)),
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::config(field, "expected one value or `signal,idler`")),
    }
}

/// Loads the config file, if any, and applies flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let o = &cli.overrides;
    let mut cfg = match &o.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::config("config", e.to_string()))?
        }
        None => RunConfig::default(),
    };
    if let Some(z) = o.z {
        cfg.z = Some(z);
        cfg.nbar = None;
    }
    if let Some(n) = o.nbar {
        cfg.nbar = Some(n);
        if o.z.is_none() {
            cfg.z = None;
        }
    }
    if let Some(v) = &o.eta_p {
        (cfg.eta_p_s, cfg.eta_p_i) = pair("eta_p", v)?;
    }
    if let Some(v) = &o.eta_d {
        (cfg.eta_d_s, cfg.eta_d_i) = pair("eta_d", v)?;
    }
    if let Some(l) = o.loss {
        let m = LossModel::symmetric_total_loss(l).map_err(|e| Error::config("loss", e.to_string()))?;
        (cfg.eta_p_s, cfg.eta_p_i, cfg.eta_d_s, cfg.eta_d_i) = (m.eta_p_s, m.eta_p_i, m.eta_d_s, m.eta_d_i);
    }
    macro_rules! set {
        ($src:expr => $dst:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    set!(o.cutoff => cfg.cutoff);
    if o.pnr_max.is_some() {
        cfg.pnr_max = o.pnr_max;
    }
    set!(o.detector => cfg.detector);
    set!(o.phases => cfg.phases.points);
    set!(o.phase_start => cfg.phases.start);
    set!(o.phase_stop => cfg.phases.stop);
    set!(o.qfi => cfg.qfi);
    if o.seed.is_some() {
        cfg.seed = o.seed;
    }
    if o.threads.is_some() {
        cfg.threads = o.threads;
    }
    set!(o.out => cfg.output_dir);
    cfg.degrees |= o.degrees;

    match &cli.command {
        Command::Sweep => {}
        Command::LossScan {
            losses,
            nbar_grid,
            loss_model,
            robustness_phase,
        } => {
            set!(losses => cfg.loss_scan.losses);
            set!(nbar_grid => cfg.loss_scan.nbar_grid);
            set!(loss_model => cfg.loss_scan.loss_model);
            set!(robustness_phase => cfg.loss_scan.robustness_phase);
        }
        Command::Tomography {
            probes,
            kmax,
            n_outcomes,
            allow_rank_deficient,
        } => {
            if probes.is_some() {
                cfg.tomography.probes = probes.clone();
            }
            set!(kmax => cfg.tomography.kmax);
            if n_outcomes.is_some() {
                cfg.tomography.n_outcomes = *n_outcomes;
            }
            cfg.tomography.allow_rank_deficient |= allow_rank_deficient;
        }
        Command::Fit { counts, fit } => apply_fit_flags(&mut cfg, counts, fit),
        Command::Bootstrap {
            counts,
            fit,
            resamples,
            level,
            band_points,
        } => {
            apply_fit_flags(&mut cfg, counts, fit);
            set!(resamples => cfg.bootstrap.resamples);
            set!(level => cfg.bootstrap.level);
            set!(band_points => cfg.bootstrap.band_points);
        }
        Command::SimulateCounts { trials, count_phases } => {
            set!(trials => cfg.simulate.trials);
            set!(count_phases => cfg.simulate.phases);
        }
    }

    // phases are radians from here on
    if cfg.degrees {
        let r = PI / 180.0;
        cfg.phases.start *= r;
        cfg.phases.stop *= r;
        cfg.loss_scan.robustness_phase *= r;
        cfg.degrees = false;
    }
    validate(&cfg, cli.command.name())?;
    Ok(cfg)
}

fn apply_fit_flags(cfg: &mut RunConfig, counts: &Option<PathBuf>, fit: &FitFlags) {
    if counts.is_some() {
        cfg.fit.counts = counts.clone();
    }
    if let Some(f) = &fit.free {
        cfg.fit.free = f.clone();
    }
    if let Some(s) = fit.starts {
        cfg.fit.starts = s;
    }
    if let Some(m) = fit.max_iterations {
        cfg.fit.max_iterations = m;
    }
    cfg.fit.include_single_photon |= fit.include_single_photon;
    cfg.fit.strict |= fit.strict;
}

fn validate(cfg: &RunConfig, command: &str) -> Result<()> {
    match (cfg.z, cfg.nbar) {
        (Some(_), Some(_)) => return Err(Error::config("z", "give exactly one of `z` and `nbar`, not both")),
        (None, None) if command != "tomography" => {
            return Err(Error::config("z", "one of `z` or `nbar` is required"))
        }
        _ => {}
    }
    if cfg.cutoff == 0 {
        return Err(Error::config("cutoff", "cutoff must be at least 1"));
    }
    if let Some(p) = cfg.pnr_max {
        if p == 0 || p > cfg.cutoff {
            return Err(Error::config("pnr_max", format!("must lie in 1..={}", cfg.cutoff)));
        }
    }
    if !matches!(cfg.detector.as_str(), "ideal-pnr" | "click") && !cfg.detector.starts_with("povm-file:") {
        return Err(Error::config(
            "detector",
            format!("`{}` is not one of ideal-pnr, click, povm-file:PATH", cfg.detector),
        ));
    }
    if cfg.phases.points == 0 {
        return Err(Error::config("phases.points", "phase grid needs at least one point"));
    }
    if !(cfg.phases.start.is_finite() && cfg.phases.stop.is_finite() && cfg.phases.stop > cfg.phases.start) {
        return Err(Error::config("phases", "need finite `start` < `stop`"));
    }
    if cfg.threads == Some(0) {
        return Err(Error::config("threads", "need at least one thread"));
    }
    let stochastic = matches!(command, "fit" | "bootstrap" | "simulate-counts");
    if stochastic && cfg.seed.is_none() {
        return Err(Error::config("seed", format!("`{command}` is stochastic and needs a seed")));
    }
    match command {
        "loss-scan" => {
            if cfg.loss_scan.losses.is_empty() {
                return Err(Error::config("loss_scan.losses", "loss grid is empty"));
            }
            if let Some(l) = cfg.loss_scan.losses.iter().find(|l| !(0.0..=1.0).contains(*l)) {
                return Err(Error::config("loss_scan.losses", format!("loss {l} outside [0, 1]")));
            }
            if let Some(n) = cfg.loss_scan.nbar_grid.iter().find(|n| !(**n > 0.0 && n.is_finite())) {
                return Err(Error::config("loss_scan.nbar_grid", format!("mean photon number {n} must be > 0")));
            }
        }
        "tomography" if cfg.tomography.probes.is_none() => {
            return Err(Error::config("tomography.probes", "no probe file given"));
        }
        "fit" | "bootstrap" => {
            if cfg.fit.counts.is_none() {
                return Err(Error::config("fit.counts", "no counts file given"));
            }
            if cfg.fit.free.is_empty() {
                return Err(Error::config("fit.free", "no free parameters"));
            }
            if cfg.fit.starts == 0 {
                return Err(Error::config("fit.starts", "need at least one start"));
            }
            if command == "bootstrap" {
                if cfg.bootstrap.resamples < 100 {
                    return Err(Error::config("bootstrap.resamples", "at least 100 resamples are required"));
                }
                if !(cfg.bootstrap.level > 0.0 && cfg.bootstrap.level < 1.0) {
                    return Err(Error::config("bootstrap.level", "level must lie in (0, 1)"));
                }
                if cfg.bootstrap.band_points == 0 {
                    return Err(Error::config("bootstrap.band_points", "need at least one phase"));
                }
            }
        }
        "simulate-counts" if cfg.simulate.phases == 0 => {
            return Err(Error::config("simulate.phases", "need at least one phase setting"));
        }
        _ => {}
    }
    Ok(())
}

impl RunConfig {
    pub fn squeezing(&self) -> Result<SqueezingParams> {
        match (self.z, self.nbar) {
            (Some(z), None) => SqueezingParams::new(z).map_err(|e| Error::config("z", e.to_string())),
            (None, Some(n)) => SqueezingParams::from_mean_photons(n).map_err(|e| Error::config("nbar", e.to_string())),
            _ => Err(Error::config("z", "give exactly one of `z` and `nbar`")),
        }
    }

    pub fn loss(&self) -> Result<LossModel> {
        LossModel::new(self.eta_p_s, self.eta_p_i, self.eta_d_s, self.eta_d_i)
            .map_err(|e| Error::config("eta", e.to_string()))
    }

    pub fn fock_cutoff(&self) -> Result<FockCutoff> {
        FockCutoff::new(self.cutoff).map_err(|e| Error::config("cutoff", e.to_string()))
    }

    pub fn interferometer(&self) -> Result<InterferometerConfig> {
        Ok(InterferometerConfig::new(self.squeezing()?, self.loss()?, 0.0, self.fock_cutoff()?))
    }

    pub fn model_params(&self) -> Result<ModelParams> {
        Ok(ModelParams::from_config(&self.interferometer()?))
    }

    /// Signal and idler detectors.
    pub fn detectors(&self) -> Result<(DetectorPovm, DetectorPovm)> {
        let pnr = || {
            DetectorPovm::ideal_pnr(self.pnr_max.unwrap_or(self.cutoff), self.cutoff)
                .map_err(|e| Error::config("detector", e.to_string()))
        };
        let d = match self.detector.as_str() {
            "ideal-pnr" => pnr()?,
            "click" => DetectorPovm::click_from(&pnr()?),
            other => {
                let Some(path) = other.strip_prefix("povm-file:") else {
                    return Err(Error::config(
                        "detector",
                        format!("`{other}` is not one of ideal-pnr, click, povm-file:PATH"),
                    ));
                };
                let povm = DetectorPovm::load(path)
                    .map_err(|e| Error::config("detector", format!("cannot load POVM from {path}: {e}")))?;
                if povm.k_max() < self.cutoff {
                    return Err(Error::config(
                        "detector",
                        format!(
                            "POVM in {path} covers photon numbers up to {} but the cutoff is {}",
                            povm.k_max(),
                            self.cutoff
                        ),
                    ));
                }
                povm
            }
        };
        Ok((d.clone(), d))
    }

    pub fn phase_grid(&self) -> Vec<f64> {
        self.phases.grid(self.phases.points)
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or_default()
    }
}

/// What every output file records about the run that produced it.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_hash: String,
    pub config: RunConfig,
}

impl Provenance {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            tool: TOOL,
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config_hash: config_hash(config),
            config: config.clone(),
        }
    }

    /// Lines for a `#` CSV header.
    pub fn header(&self) -> String {
        format!(
            "{} {} {}\nconfig_hash={}\nconfig={}",
            self.tool,
            self.version,
            self.command,
            self.config_hash,
            serde_json::to_string(&self.config).unwrap_or_default()
        )
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn create_output(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path)
        .map_err(|e| Error::config("output_dir", format!("cannot write {}: {e}", path.display())))?;
    Ok(std::io::BufWriter::new(f))
}

fn write_table(path: &Path, prov: &Provenance, columns: &str, rows: &[String]) -> Result<()> {
    let mut w = create_output(path)?;
    for line in prov.header().lines() {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "{columns}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

fn e12(v: f64) -> String {
    format!("{v:.12e}")
}

/// Files written by a subcommand.
#[derive(Debug, Clone, Default)]
pub struct Outputs {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> Result<Outputs> {
    let cfg = resolve_config(cli)?;
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Error::config("output_dir", format!("cannot create {}: {e}", cfg.output_dir.display())))?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::config("threads", e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Sweep => cmd_sweep(&cfg),
        Command::LossScan { .. } => cmd_loss_scan(&cfg),
        Command::Tomography { .. } => cmd_tomography(&cfg),
        Command::Fit { .. } => cmd_fit(&cfg),
        Command::Bootstrap { .. } => cmd_bootstrap(&cfg),
        Command::SimulateCounts { .. } => cmd_simulate_counts(&cfg),
    })
}

/// Parses arguments, runs, reports to stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(out) => {
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            for f in &out.files {
                eprintln!("wrote {}", f.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<Outputs> {
    let prov = Provenance::new("sweep", cfg);
    let template = cfg.interferometer()?;
    let (povm_s, povm_i) = cfg.detectors()?;
    let report = sweep_fisher(&template, &cfg.phase_grid(), &povm_s, &povm_i, cfg.qfi)?;

    let csv_path = cfg.output_dir.join("fisher.csv");
    let mut w = create_output(&csv_path)?;
    report.write_csv(&mut w, &prov.header())?;
    w.flush()?;

    let argmax = report
        .cfi
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
    let fraction = |kind| {
        if report.snl > 0.0 {
            sub_snl_fraction(&report, kind).ok()
        } else {
            None
        }
    };
    let summary = json!({
        "snl": report.snl,
        "max_cfi": argmax.1,
        "max_cfi_phase": report.phase_grid[argmax.0],
        "max_qfi": report.qfi.iter().copied().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))),
        "sub_snl_fraction_cfi": fraction(FisherKind::Cfi),
        "sub_snl_fraction_qfi": if report.qfi.is_empty() { None } else { fraction(FisherKind::Qfi) },
        "truncation_tail": report.truncation_tail,
    });
    let json_path = cfg.output_dir.join("fisher.json");
    write_json(
        &json_path,
        &json!({ "provenance": prov, "summary": summary, "report": report }),
    )?;
    Ok(Outputs {
        files: vec![csv_path, json_path],
        warnings: Vec::new(),
    })
}

pub fn cmd_loss_scan(cfg: &RunConfig) -> Result<Outputs> {
    let prov = Provenance::new("loss-scan", cfg);
    let base = cfg.interferometer()?;
    let (povm_s, povm_i) = cfg.detectors()?;
    let scan = &cfg.loss_scan;
    let grid = cfg.phase_grid();
    let base_loss = base.loss;
    let loss_for = |l: f64| match scan.loss_model {
        LossAxis::Symmetric => LossModel::symmetric_total_loss(l),
        LossAxis::AddedSample => base_loss.with_added_loss(l),
    };
    let snl = base.squeezing.mean_photons();
    let per_photon = |v: f64| if snl > 0.0 { v / snl } else { 0.0 };

    let mut rows = Vec::new();
    for &l in &scan.losses {
        let mut c = base;
        c.loss = loss_for(l)?;
        let stats = NumberStatistics::new(&c)?;
        let (theta, cfi) = max_cfi(&stats, &povm_s, &povm_i, scan.coarse_points, scan.tol)?;
        let qfi = match cfg.qfi {
            QfiMode::None => None,
            _ => {
                let p = PreparedInterferometer::new(&c.with_convention(PhaseConvention::Balanced))?;
                Some(max_qfi(&p, scan.coarse_points, scan.tol)?.1)
            }
        };
        let at_phase = crate::metrology::cfi_at(&stats, &povm_s, &povm_i, scan.robustness_phase)?;
        let report = sweep_fisher(&c, &grid, &povm_s, &povm_i, QfiMode::None)?;
        let fraction = if snl > 0.0 {
            e12(sub_snl_fraction(&report, FisherKind::Cfi)?)
        } else {
            String::new()
        };
        let (eta_s, eta_i) = c.loss.overall();
        rows.push(format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            e12(l),
            e12(eta_s),
            e12(eta_i),
            e12(theta),
            e12(cfi),
            qfi.map(e12).unwrap_or_default(),
            e12(per_photon(cfi)),
            qfi.map(|q| e12(per_photon(q))).unwrap_or_default(),
            e12(at_phase),
            e12(snl),
            fraction
        ));
    }
    let loss_path = cfg.output_dir.join("fi_vs_loss.csv");
    write_table(
        &loss_path,
        &prov,
        "loss,eta_signal,eta_idler,phase_opt,max_cfi,max_qfi,cfi_per_photon,qfi_per_photon,cfi_at_robustness_phase,snl,sub_snl_fraction",
        &rows,
    )?;

    let mut files = vec![loss_path];
    let mut warnings = Vec::new();
    if !scan.nbar_grid.is_empty() {
        if cfg.detector == "click" {
            warnings.push("click detectors selected; ratio_vs_nbar compares them with themselves".into());
        }
        let search = MaxSearch {
            coarse_points: scan.coarse_points,
            tol: scan.tol,
        };
        let ratios = pnr_click_ratio(&base, &scan.nbar_grid, &povm_s, &povm_i, search)?;
        let rows: Vec<String> = ratios
            .iter()
            .map(|r| format!("{},{},{},{}", e12(r.n_bar), e12(r.max_cfi_pnr), e12(r.max_cfi_click), e12(r.ratio)))
            .collect();
        let path = cfg.output_dir.join("ratio_vs_nbar.csv");
        write_table(&path, &prov, "nbar,max_cfi_pnr,max_cfi_click,ratio", &rows)?;
        files.push(path);

        let click_s = DetectorPovm::click_from(&povm_s);
        let click_i = DetectorPovm::click_from(&povm_i);
        let mut rows = Vec::new();
        for &n in &scan.nbar_grid {
            let mut c = base;
            c.squeezing = SqueezingParams::from_mean_photons(n)?;
            let pnr = sweep_fisher(&c, &grid, &povm_s, &povm_i, QfiMode::None)?;
            let click = sweep_fisher(&c, &grid, &click_s, &click_i, QfiMode::None)?;
            rows.push(format!(
                "{},{},{}",
                e12(n),
                e12(sub_snl_fraction(&pnr, FisherKind::Cfi)?),
                e12(sub_snl_fraction(&click, FisherKind::Cfi)?)
            ));
        }
        let path = cfg.output_dir.join("subsnl_vs_nbar.csv");
        write_table(&path, &prov, "nbar,sub_snl_fraction_pnr,sub_snl_fraction_click", &rows)?;
        files.push(path);
    }

    // loss at which the CFI at the robustness phase falls to the SNL
    let threshold = if snl > 0.0 {
        max_tolerable_loss(&base, &povm_s, &povm_i, scan.robustness_phase, loss_for, 1.0, 1e-6)?
    } else {
        None
    };
    let path = cfg.output_dir.join("loss_scan.json");
    write_json(
        &path,
        &json!({
            "provenance": prov,
            "robustness_phase": scan.robustness_phase,
            "loss_model": scan.loss_model,
            "max_tolerable_loss": threshold,
        }),
    )?;
    files.push(path);
    Ok(Outputs { files, warnings })
}

pub fn cmd_tomography(cfg: &RunConfig) -> Result<Outputs> {
    let prov = Provenance::new("tomography", cfg);
    let t = &cfg.tomography;
    let path = t.probes.as_ref().expect("validated");
    let records = read_probe_csv(path)?;
    let (probes, counts) = group_probe_records(&records, t.n_outcomes)?;
    let response = ResponseMatrix::from_counts(&counts)?;
    let c = coherent_probe_matrix(&probes, t.kmax)?;
    let options = TomographyOptions {
        allow_rank_deficient: t.allow_rank_deficient,
        ..Default::default()
    };
    let result = tomography_mle(&response, &c, &probes.shots, &options)?;
    let mut povm = serde_json::to_value(&result.povm)?;
    let obj = povm.as_object_mut().expect("POVM serializes to an object");
    obj.insert("provenance".into(), serde_json::to_value(&prov)?);
    obj.insert("diagnostics".into(), serde_json::to_value(&result.diagnostics)?);
    let out = cfg.output_dir.join("povm.json");
    write_json(&out, &povm)?;
    let mut warnings = result.diagnostics.warnings.clone();
    if !result.diagnostics.converged {
        warnings.push("tomography stopped at the iteration limit".into());
    }
    Ok(Outputs {
        files: vec![out],
        warnings,
    })
}

fn load_counts(cfg: &RunConfig) -> Result<CountHistogram> {
    let path = cfg.fit.counts.as_ref().expect("validated");
    let hist = CountHistogram::load_csv(path).map_err(|e| match e {
        Error::Io(io) => Error::config("fit.counts", format!("cannot read {}: {io}", path.display())),
        other => other,
    })?;
    hist.validate(cfg.fit.strict)?;
    Ok(hist)
}

fn fit_options(cfg: &RunConfig) -> Result<FitOptions> {
    Ok(FitOptions {
        free: cfg.fit.free.clone(),
        initial: cfg.model_params()?,
        cutoff: cfg.fock_cutoff()?,
        include_single_photon: cfg.fit.include_single_photon,
        starts: cfg.fit.starts,
        simplex_step: 0.5,
        max_iterations: cfg.fit.max_iterations,
        seed: cfg.seed(),
    })
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<Outputs> {
    let prov = Provenance::new("fit", cfg);
    let hist = load_counts(cfg)?;
    let (povm_s, povm_i) = cfg.detectors()?;
    let fit = fit_model(&hist, &povm_s, &povm_i, &fit_options(cfg)?)?;
    let snl = if fit.covariance.is_some() {
        Some(snl_with_uncertainty(&fit, cfg.fit.level)?)
    } else {
        None
    };
    let out = cfg.output_dir.join("fit.json");
    write_json(&out, &json!({ "provenance": prov, "fit": fit, "snl": snl }))?;
    Ok(Outputs {
        files: vec![out],
        warnings: fit.warnings.clone(),
    })
}

pub fn cmd_bootstrap(cfg: &RunConfig) -> Result<Outputs> {
    let prov = Provenance::new("bootstrap", cfg);
    let hist = load_counts(cfg)?;
    let (povm_s, povm_i) = cfg.detectors()?;
    let grid = cfg.phases.grid(cfg.bootstrap.band_points);
    let b = &cfg.bootstrap;
    let (fit, band) = cfi_band(
        &hist,
        &povm_s,
        &povm_i,
        &fit_options(cfg)?,
        &grid,
        b.resamples,
        b.level,
        cfg.seed(),
    )?;
    let out = cfg.output_dir.join("band.csv");
    let mut w = create_output(&out)?;
    let header = format!(
        "{}\nsnl={:.12e}\nfailed_resamples={}",
        prov.header(),
        fit.n_bar_hat,
        band.failed_resamples
    );
    band.write_csv(&mut w, &grid, &header)?;
    w.flush()?;
    Ok(Outputs {
        files: vec![out],
        warnings: fit.warnings,
    })
}

pub fn cmd_simulate_counts(cfg: &RunConfig) -> Result<Outputs> {
    let prov = Provenance::new("simulate-counts", cfg);
    let (povm_s, povm_i) = cfg.detectors()?;
    let phases = cfg.phases.grid(cfg.simulate.phases);
    let hist = simulate_counts(
        &cfg.model_params()?,
        cfg.fock_cutoff()?,
        &phases,
        cfg.simulate.trials,
        &povm_s,
        &povm_i,
        cfg.seed(),
    )?;
    let out = cfg.output_dir.join("counts.csv");
    let mut w = create_output(&out)?;
    hist.write_csv(&mut w, &prov.header())?;
    w.flush()?;
    Ok(Outputs {
        files: vec![out],
        warnings: Vec::new(),
    })
}
