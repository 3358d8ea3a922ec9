//! Simulate joint counts from a known source, fit z and the preparation
//! efficiencies back, and report the SNL with its 95% interval.

use std::time::Instant;

use tmsv_metrology::detectors::DetectorPovm;
use tmsv_metrology::fock::FockCutoff;
use tmsv_metrology::inference::{fit_model, simulate_counts, snl_with_uncertainty, FitOptions, ModelParams};

fn main() -> tmsv_metrology::Result<()> {
    let cutoff = FockCutoff::new(10)?;
    let pnr = DetectorPovm::ideal_pnr(10, 10)?;
    let truth = ModelParams::uniform(0.05, 0.85);
    let phases: Vec<f64> = (0..20).map(|i| std::f64::consts::PI * (i as f64 + 0.5) / 20.0).collect();

    let hist = simulate_counts(&truth, cutoff, &phases, 10_000_000, &pnr, &pnr, 42)?;
    let mut start = truth;
    start.z = 0.1;
    start.eta_p_s = 0.7;
    start.eta_p_i = 0.7;
    let options = FitOptions::supported(start, cutoff, 42);

    let t0 = Instant::now();
    let fit = fit_model(&hist, &pnr, &pnr, &options)?;
    println!("fit took {:.2} s", t0.elapsed().as_secs_f64());
    for &p in &fit.free {
        let se = fit.std_error(p).unwrap_or(f64::NAN);
        let dev = (fit.params.get(p) - truth.get(p)) / se;
        println!("{:>8} = {:.6} ± {:.6}  (truth {:.4}, {:+.2} se)", p.name(), fit.params.get(p), se, truth.get(p), dev);
    }
    let snl = snl_with_uncertainty(&fit, 0.95)?;
    println!(
        "n̄ = {:.6e} (truth {:.6e}), 95% interval [{:.6e}, {:.6e}]",
        fit.n_bar_hat,
        truth.mean_photons(),
        snl.lower,
        snl.upper
    );
    println!("G = {:.1} on {} dof", fit.g_statistic, fit.degrees_of_freedom);
    for w in &fit.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
