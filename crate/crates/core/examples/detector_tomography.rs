//! Coherent-probe tomography of a lossy photon-number-resolving detector,
//! from exact response data and from Poisson-noisy counts.

use tmsv_metrology::detectors::{
    coherent_probe_matrix, model_response, simulate_probe_counts, tomography_mle, DetectorPovm, ProbeSet,
    ResponseMatrix, TomographyOptions,
};
use tmsv_metrology::sampling::seeded_rng;

fn main() -> tmsv_metrology::Result<()> {
    let truth = DetectorPovm::efficiency(0.9, 9, 9)?;
    let probes = ProbeSet::uniform(ProbeSet::default_ladder(), 1_000_000)?;
    let c = coherent_probe_matrix(&probes, truth.k_max())?;
    let options = TomographyOptions::default();

    let exact = tomography_mle(&model_response(&c, &truth)?, &c, &probes.shots, &options)?;
    println!(
        "exact data: {} iterations, max-abs error {:.2e}",
        exact.diagnostics.iterations,
        exact.povm.max_abs_diff(&truth)?
    );

    let counts = simulate_probe_counts(&truth, &probes, &mut seeded_rng(1, 0))?;
    let noisy = tomography_mle(&ResponseMatrix::from_counts(&counts)?, &c, &probes.shots, &options)?;
    println!(
        "1e6 shots per probe: max-abs error {:.3}, condition number of C {:.2e}",
        noisy.povm.max_abs_diff(&truth)?,
        noisy.diagnostics.condition_number
    );
    println!("k   θ_k(k) fitted   binomial η^k");
    for k in 0..=truth.k_max() {
        println!("{k}   {:.4}          {:.4}", noisy.povm.theta(k, k), truth.theta(k, k));
    }
    Ok(())
}
