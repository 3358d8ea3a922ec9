//! How much loss the experiment tolerates before the CFI at π/4 drops to the
//! SNL, and how the PNR advantage over click detection grows with n̄.

use std::f64::consts::FRAC_PI_4;

use tmsv_metrology::detectors::DetectorPovm;
use tmsv_metrology::fock::FockCutoff;
use tmsv_metrology::metrology::{max_tolerable_loss, pnr_click_ratio, MaxSearch};
use tmsv_metrology::optics::{InterferometerConfig, LossModel, SqueezingParams};

fn main() -> tmsv_metrology::Result<()> {
    let cutoff = FockCutoff::new(10)?;
    let pnr = DetectorPovm::ideal_pnr(10, 10)?;
    let experiment = InterferometerConfig::new(
        SqueezingParams::from_mean_photons(3.631e-3)?,
        LossModel::detection_only(0.805, 0.815)?,
        0.0,
        cutoff,
    );

    let symmetric = max_tolerable_loss(&experiment, &pnr, &pnr, FRAC_PI_4, LossModel::symmetric_total_loss, 1.0, 1e-6)?;
    let base = experiment.loss;
    let added = max_tolerable_loss(&experiment, &pnr, &pnr, FRAC_PI_4, |l| base.with_added_loss(l), 1.0, 1e-6)?;
    println!("tolerable symmetric total loss: {:?}", symmetric);
    println!("tolerable added sample loss:    {:?}", added);

    let cutoff = FockCutoff::new(16)?;
    let pnr = DetectorPovm::ideal_pnr(16, 16)?;
    let template = InterferometerConfig::new(
        SqueezingParams::from_mean_photons(0.01)?,
        LossModel::symmetric_total_loss(0.2)?,
        0.0,
        cutoff,
    );
    let grid = [0.01, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0];
    println!("\n   n̄     max CFI PNR   max CFI click   ratio");
    for p in pnr_click_ratio(&template, &grid, &pnr, &pnr, MaxSearch::default())? {
        println!("{:6.2}   {:.4e}    {:.4e}      {:.3}", p.n_bar, p.max_cfi_pnr, p.max_cfi_click, p.ratio);
    }
    Ok(())
}
