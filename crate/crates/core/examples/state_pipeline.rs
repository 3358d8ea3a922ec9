//! The optical pipeline step by step: squeezed vacuum, interferometer,
//! detection loss, and the resulting joint photon-number distribution.

use tmsv_metrology::detectors::{joint_outcome_probabilities, DetectorPovm};
use tmsv_metrology::fock::{FockCutoff, Mode};
use tmsv_metrology::optics::{
    evolve_pipeline, loss_channel, tmsv_state, InterferometerConfig, LossModel, SqueezingParams,
};

fn main() -> tmsv_metrology::Result<()> {
    let cutoff = FockCutoff::new(6)?;
    let squeezing = SqueezingParams::from_mean_photons(0.2)?;
    println!("z = {:.4}, n̄ = {}", squeezing.z(), squeezing.mean_photons());

    let source = tmsv_state(squeezing, cutoff);
    println!("⟨n_s⟩ = {:.4}, ⟨n_i⟩ = {:.4}", source.mean_photons(Mode::Signal), source.mean_photons(Mode::Idler));
    let lossy = loss_channel(&source, Mode::Signal, 0.5)?;
    println!("after 50% signal loss ⟨n_s⟩ = {:.4}", lossy.mean_photons(Mode::Signal));

    let config = InterferometerConfig::new(squeezing, LossModel::uniform(0.9)?, 0.7, cutoff);
    let detected = evolve_pipeline(&config)?;
    let pnr = DetectorPovm::ideal_pnr(4, 6)?;
    let dist = joint_outcome_probabilities(&detected, &pnr, &pnr)?;
    println!("\np(j, k) at θ = 0.7, 90% efficiency per stage");
    let (rows, cols) = dist.shape();
    for j in 0..rows {
        let line: Vec<String> = (0..cols).map(|k| format!("{:.2e}", dist.prob(j, k))).collect();
        println!("{:>4}  {}", pnr.outcomes()[j], line.join("  "));
    }
    println!("total weight {:.12}", dist.total());
    Ok(())
}
