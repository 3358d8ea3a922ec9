//! Percentile bootstrap band on the CFI curve of a fitted model, at two
//! sample sizes. Quadrupling the trials should roughly halve the band.

use std::time::Instant;

use tmsv_metrology::detectors::DetectorPovm;
use tmsv_metrology::fock::FockCutoff;
use tmsv_metrology::inference::{cfi_band, simulate_counts, FitOptions, ModelParams};

fn main() -> tmsv_metrology::Result<()> {
    let cutoff = FockCutoff::new(6)?;
    let pnr = DetectorPovm::ideal_pnr(6, 6)?;
    let truth = ModelParams::uniform(0.05, 0.85);
    let phases: Vec<f64> = (0..20).map(|i| std::f64::consts::PI * (i as f64 + 0.5) / 20.0).collect();
    let grid: Vec<f64> = (0..16).map(|i| std::f64::consts::PI * (i as f64 + 0.5) / 16.0).collect();
    let mut options = FitOptions::supported(truth, cutoff, 7);
    options.include_single_photon = true;

    let mut mean_width = Vec::new();
    for trials in [10_000_000u64, 40_000_000] {
        let hist = simulate_counts(&truth, cutoff, &phases, trials, &pnr, &pnr, 11)?;
        let t0 = Instant::now();
        let (fit, band) = cfi_band(&hist, &pnr, &pnr, &options, &grid, 400, 0.95, 7)?;
        let widths = band.widths();
        let mean = widths.iter().sum::<f64>() / widths.len() as f64;
        println!(
            "{trials:>8} trials: n̄ = {:.4e}, mean band width {mean:.4e}, {} failed resamples, {:.1} s",
            fit.n_bar_hat,
            band.failed_resamples,
            t0.elapsed().as_secs_f64()
        );
        mean_width.push(mean);
    }
    println!("width ratio 4x/1x = {:.3}", mean_width[1] / mean_width[0]);
    Ok(())
}
