use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

/// Deterministic generator for `(seed, stream)`; independent streams give
/// independent substreams for parallel work.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Multinomial draw of `trials` over `probs` by sequential conditional binomials.
/// `probs` need not sum to one; any remainder is left undrawn.
pub fn multinomial<R: Rng + ?Sized>(rng: &mut R, trials: u64, probs: &[f64]) -> Vec<u64> {
    let mut out = vec![0u64; probs.len()];
    let mut remaining = trials;
    let mut mass = 1.0f64;
    for (slot, &p) in out.iter_mut().zip(probs) {
        if remaining == 0 || mass <= 0.0 {
            break;
        }
        let p = p.max(0.0);
        let q = (p / mass).clamp(0.0, 1.0);
        let draw = if q >= 1.0 {
            remaining
        } else if q <= 0.0 {
            0
        } else {
            Binomial::new(remaining, q).expect("valid binomial").sample(rng)
        };
        *slot = draw;
        remaining -= draw;
        mass -= p;
    }
    out
}
