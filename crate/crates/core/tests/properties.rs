use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tmsv_metrology::detectors::{joint_outcome_probabilities, DetectorPovm};
use tmsv_metrology::fock::{hermitian_eigenvalues, FockCutoff, Mode};
use tmsv_metrology::inference::{snl_interval, CountHistogram};
use tmsv_metrology::metrology::{cfi_at, qfi_at, sub_snl_fraction, sweep_fisher, FisherKind, QfiMode};
use tmsv_metrology::optics::{
    evolve_pipeline, loss_channel, InterferometerConfig, LossModel, NumberStatistics, PhaseConvention,
    PreparedInterferometer, SqueezingParams,
};
use tmsv_metrology::sampling::{multinomial, seeded_rng};

fn cut(n: usize) -> FockCutoff {
    FockCutoff::new(n).unwrap()
}

fn eta() -> impl Strategy<Value = f64> {
    0.3f64..=1.0
}

fn config() -> impl Strategy<Value = InterferometerConfig> {
    (0.0f64..0.55, eta(), eta(), eta(), eta(), -7.0f64..7.0).prop_map(|(z, a, b, c, d, phase)| {
        InterferometerConfig::new(
            SqueezingParams::new(z).unwrap(),
            LossModel::new(a, b, c, d).unwrap(),
            phase,
            cut(8),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn efficiency_povm_is_complete(eta in 0.0f64..=1.0, n_max in 1usize..8, extra in 0usize..4) {
        let p = DetectorPovm::efficiency(eta, n_max, n_max + extra).unwrap();
        for row in p.rows() {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let click = DetectorPovm::click_from(&p);
        for (k, row) in click.rows().iter().enumerate() {
            prop_assert!((row[0] - (1.0 - eta).powi(k as i32)).abs() < 1e-12);
            prop_assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn outcome_probabilities_are_a_subdistribution(cfg in config()) {
        let pnr = DetectorPovm::ideal_pnr(8, 8).unwrap();
        let dist = joint_outcome_probabilities(&evolve_pipeline(&cfg).unwrap(), &pnr, &pnr).unwrap();
        prop_assert!(dist.probs().iter().all(|&p| p >= -1e-14));
        let tail = NumberStatistics::new(&cfg).unwrap().truncation_tail();
        prop_assert!((dist.total() - (1.0 - tail)).abs() < 1e-12);
    }

    #[test]
    fn fisher_ordering(cfg in config()) {
        let pnr = DetectorPovm::ideal_pnr(8, 8).unwrap();
        let click = DetectorPovm::click_from(&pnr);
        let stats = NumberStatistics::new(&cfg).unwrap();
        let f_pnr = cfi_at(&stats, &pnr, &pnr, cfg.phase).unwrap();
        let f_click = cfi_at(&stats, &click, &click, cfg.phase).unwrap();
        let prepared = PreparedInterferometer::new(&cfg.with_convention(PhaseConvention::Balanced)).unwrap();
        let q = qfi_at(&prepared, cfg.phase).unwrap();
        prop_assert!(f_click >= 0.0);
        prop_assert!(f_click <= f_pnr * (1.0 + 1e-8) + 1e-15, "{} > {}", f_click, f_pnr);
        prop_assert!(f_pnr <= q * (1.0 + 1e-8) + 1e-15, "{} > {}", f_pnr, q);
    }

    #[test]
    fn cfi_is_even_in_phase(cfg in config()) {
        let pnr = DetectorPovm::ideal_pnr(8, 8).unwrap();
        let stats = NumberStatistics::new(&cfg).unwrap();
        let a = cfi_at(&stats, &pnr, &pnr, cfg.phase).unwrap();
        let b = cfi_at(&stats, &pnr, &pnr, -cfg.phase).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1e-12));
    }

    #[test]
    fn loss_channel_keeps_a_valid_state(z in 0.0f64..0.6, eta in 0.0f64..=1.0, signal in any::<bool>()) {
        let cfg = InterferometerConfig::new(SqueezingParams::new(z).unwrap(), LossModel::lossless(), 0.4, cut(6));
        let state = evolve_pipeline(&cfg).unwrap();
        let mode = if signal { Mode::Signal } else { Mode::Idler };
        let out = loss_channel(&state, mode, eta).unwrap();
        prop_assert!((out.trace() - state.trace()).abs() < 1e-12);
        prop_assert!(hermitian_eigenvalues(&out.density_matrix())[0] > -1e-12);
        let before = state.mean_photons(mode);
        prop_assert!((out.mean_photons(mode) - eta * before).abs() < 1e-10);
    }

    #[test]
    fn multinomial_conserves_trials(probs in prop::collection::vec(0.0f64..1.0, 1..12), trials in 0u64..100_000, seed in any::<u64>()) {
        let total: f64 = probs.iter().sum();
        prop_assume!(total > 0.0);
        let p: Vec<f64> = probs.iter().map(|v| v / total).collect();
        let draw = multinomial(&mut seeded_rng(seed, 0), trials, &p);
        prop_assert_eq!(draw.iter().sum::<u64>(), trials);
        for (c, q) in draw.iter().zip(&p) {
            if *q == 0.0 {
                prop_assert_eq!(*c, 0);
            }
        }
    }

    #[test]
    fn histogram_csv_round_trips(
        counts in prop::collection::vec(prop::collection::vec(0u64..1000, 6), 1..5),
        phase0 in -3.0f64..3.0,
    ) {
        let phases: Vec<f64> = (0..counts.len()).map(|i| phase0 + 0.37 * i as f64).collect();
        let h = CountHistogram::new(phases, 6000, (2, 3), counts).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf, "round trip").unwrap();
        let back = CountHistogram::read_csv(&buf[..]).unwrap();
        // phases pass through 13 significant digits
        prop_assert_eq!(&back.counts, &h.counts);
        for (a, b) in back.phases.iter().zip(&h.phases) {
            prop_assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn snl_interval_brackets_estimate(z in 0.0f64..0.8, sigma in 0.0f64..0.1, level in 0.5f64..0.999) {
        let e = snl_interval(z, sigma, level).unwrap();
        prop_assert!(e.lower >= 0.0);
        prop_assert!(e.lower <= e.snl && e.snl <= e.upper);
        let wider = snl_interval(z, sigma, (level + 1.0) / 2.0).unwrap();
        prop_assert!(wider.upper >= e.upper);
    }

    #[test]
    fn nbar_and_z_round_trip(n_bar in 1e-6f64..20.0) {
        let sq = SqueezingParams::from_mean_photons(n_bar).unwrap();
        prop_assert!((sq.mean_photons() - n_bar).abs() < 1e-12 * n_bar.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn sub_snl_fraction_is_a_fraction(cfg in config()) {
        prop_assume!(cfg.squeezing.z() > 1e-3);
        let pnr = DetectorPovm::ideal_pnr(8, 8).unwrap();
        let grid: Vec<f64> = (0..64).map(|i| i as f64 * std::f64::consts::TAU / 64.0).collect();
        let report = sweep_fisher(&cfg, &grid, &pnr, &pnr, QfiMode::None).unwrap();
        let f = sub_snl_fraction(&report, FisherKind::Cfi).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
    }
}

#[test]
fn seeded_streams_are_independent_and_repeatable() {
    use rand::Rng;
    let a: u64 = seeded_rng(5, 1).random();
    let b: u64 = seeded_rng(5, 1).random();
    let c: u64 = seeded_rng(5, 2).random();
    let d: u64 = ChaCha8Rng::seed_from_u64(5).random();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_ne!(c, d);
}
