//! Test-only oracles, kept independent of the implementations they check.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Literal double-sum evaluation of the exponential-kernel intensity:
/// μ + Σ_i α·β·exp(−β(t−τ_i)). O(n) per call but written directly from the
/// definition, with no recursive folding.
pub fn naive_intensity(mu: f64, alpha: f64, beta: f64, times: &[f64], t: f64) -> f64 {
    let mut acc = mu;
    for &tau in times {
        assert!(tau < t);
        acc += alpha * beta * (-beta * (t - tau)).exp();
    }
    acc
}

/// Ogata thinning sampler for a univariate exponential-kernel process.
/// The excitation state decays analytically between candidate points, so
/// generation is O(candidates).
pub fn simulate_thinning(mu: f64, alpha: f64, beta: f64, horizon: f64, seed: u64) -> Vec<f64> {
    assert!(alpha < 1.0, "subcritical processes only");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    let mut t = 0.0f64;
    // s = Σ_i exp(−β(t−τ_i)) maintained at the current time
    let mut s = 0.0f64;
    loop {
        let lambda_bar = mu + alpha * beta * s;
        let u: f64 = rng.random_range(0.0f64..1.0).max(1e-300);
        let w = -u.ln() / lambda_bar;
        let t_next = t + w;
        if t_next >= horizon {
            break;
        }
        s *= (-beta * (t_next - t)).exp();
        t = t_next;
        let lambda_t = mu + alpha * beta * s;
        if rng.random_range(0.0f64..1.0) * lambda_bar <= lambda_t {
            events.push(t);
            s += 1.0;
        }
    }
    events
}

/// Homogeneous Poisson stream on [0, horizon) at the given rate.
pub fn simulate_poisson(rate: f64, horizon: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    let mut t = 0.0f64;
    loop {
        let u: f64 = rng.random_range(0.0f64..1.0).max(1e-300);
        t += -u.ln() / rate;
        if t >= horizon {
            return events;
        }
        events.push(t);
    }
}
