//! Fisher information across the phase for the experiment's parameters,
//! compared with the shot-noise limit.

use std::time::Instant;

use tmsv_metrology::detectors::DetectorPovm;
use tmsv_metrology::fock::FockCutoff;
use tmsv_metrology::metrology::{sub_snl_fraction, sweep_fisher, uniform_phase_grid, FisherKind, QfiMode};
use tmsv_metrology::optics::{InterferometerConfig, LossModel, SqueezingParams};

fn main() -> tmsv_metrology::Result<()> {
    let cutoff = FockCutoff::new(10)?;
    let squeezing = SqueezingParams::from_mean_photons(3.631e-3)?;
    let loss = LossModel::detection_only(0.805, 0.815)?;
    let config = InterferometerConfig::new(squeezing, loss, 0.0, cutoff);
    let pnr = DetectorPovm::ideal_pnr(10, 10)?;

    let start = Instant::now();
    let report = sweep_fisher(&config, &uniform_phase_grid(2048), &pnr, &pnr, QfiMode::Both)?;
    let elapsed = start.elapsed();

    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!("n̄ = SNL          {:.4e}", report.snl);
    println!("max CFI          {:.4e}", max(&report.cfi));
    println!("max QFI (lossy)  {:.4e}", max(&report.qfi));
    println!("max QFI (ideal)  {:.4e}", max(&report.qfi_lossless));
    println!("sub-SNL fraction {:.3}", sub_snl_fraction(&report, FisherKind::Cfi)?);
    println!("2048 phases in {elapsed:.2?}");
    Ok(())
}
