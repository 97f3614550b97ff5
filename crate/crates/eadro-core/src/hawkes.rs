//! Per-event-type self-exciting intensity with an exponential kernel.
//!
//! The conditional intensity of type `l` is
//! `λ*(t) = μ + Σ_{τ_i < t} α·β·exp(−β(t−τ_i))`, with `β` a fixed
//! hyperparameter and `(μ, α)` estimated by maximum likelihood. The kernel
//! mass is `α`, so stability requires `α < 1`.
//!
//! Evaluation folds events into a running accumulator, giving O(n) per
//! sequence instead of the O(n²) naive double sum.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::par::par_map;

/// Estimated `(μ, α)` for one event type. `(0, 0)` marks a type that had no
/// training events (degenerate fit).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TypeParams {
    pub mu: f64,
    pub alpha: f64,
}

impl TypeParams {
    pub fn is_degenerate(&self) -> bool {
        self.mu == 0.0 && self.alpha == 0.0
    }
}

/// Fitted parameters for all event types, sharing one decay rate.
#[derive(Debug, Clone, PartialEq)]
pub struct HawkesParams {
    pub beta: f64,
    pub per_type: Vec<TypeParams>,
}

/// One observed event sequence: sorted times relative to the sequence start,
/// all within `[0, duration)`.
#[derive(Debug, Clone, Default)]
pub struct EventSeq {
    pub times: Vec<f64>,
    pub duration: f64,
}

/// λ*(t) for a single type, given sorted events strictly before `t`.
pub fn intensity_at(mu: f64, alpha: f64, beta: f64, times: &[f64], t: f64) -> Result<f64> {
    if beta <= 0.0 {
        return Err(Error::config("hawkes beta must be > 0"));
    }
    // acc after event k = Σ_{j<=k} exp(−β(τ_k−τ_j)), folded left to right
    let mut acc = 0.0f64;
    let mut prev: Option<f64> = None;
    for &tau in times {
        if let Some(p) = prev {
            if tau < p {
                return Err(Error::data("hawkes event times must be sorted ascending"));
            }
            acc = (-beta * (tau - p)).exp() * acc + 1.0;
        } else {
            acc = 1.0;
        }
        if tau >= t {
            return Err(Error::data(format!(
                "hawkes event at {tau} is not before evaluation time {t}"
            )));
        }
        prev = Some(tau);
    }
    let excitation = match prev {
        Some(p) => alpha * beta * acc * (-beta * (t - p)).exp(),
        None => 0.0,
    };
    Ok(mu + excitation)
}

/// Per-event quantities reused across optimizer iterations:
/// `a[i] = Σ_{j<i} exp(−β(τ_i−τ_j))` and `tail_sum = Σ_i 1 − exp(−β(T−τ_i))`.
struct SeqCache {
    a: Vec<f64>,
    tail_sum: f64,
    duration: f64,
}

fn cache_seq(seq: &EventSeq, beta: f64) -> Result<SeqCache> {
    let n = seq.times.len();
    let mut a = vec![0.0f64; n];
    let mut tail_sum = 0.0;
    for i in 0..n {
        let tau = seq.times[i];
        if tau < 0.0 || tau >= seq.duration {
            return Err(Error::data(format!(
                "hawkes event at {tau} outside [0, {})",
                seq.duration
            )));
        }
        if i > 0 {
            let dt = tau - seq.times[i - 1];
            if dt < 0.0 {
                return Err(Error::data("hawkes event times must be sorted ascending"));
            }
            a[i] = (-beta * dt).exp() * (1.0 + a[i - 1]);
        }
        tail_sum += 1.0 - (-beta * (seq.duration - tau)).exp();
    }
    Ok(SeqCache {
        a,
        tail_sum,
        duration: seq.duration,
    })
}

/// log ℒ = Σ_i log λ(τ_i) − ∫_0^T λ(s) ds and its (μ, α) gradient.
fn loglik_and_grad(caches: &[SeqCache], mu: f64, alpha: f64, beta: f64) -> (f64, f64, f64) {
    let mut ll = 0.0;
    let mut g_mu = 0.0;
    let mut g_alpha = 0.0;
    for c in caches {
        for &ai in &c.a {
            let lam = (mu + alpha * beta * ai).max(1e-12);
            ll += lam.ln();
            g_mu += 1.0 / lam;
            g_alpha += beta * ai / lam;
        }
        ll -= mu * c.duration + alpha * c.tail_sum;
        g_mu -= c.duration;
        g_alpha -= c.tail_sum;
    }
    (ll, g_mu, g_alpha)
}

const MAX_ITERS: usize = 500;
const REL_TOL: f64 = 1e-6;
const ALPHA_MAX: f64 = 0.99;

/// Maximum-likelihood `(μ, α)` for one type over independent sequences with
/// `β` fixed. The log-likelihood is jointly concave in `(μ, α)`, so projected
/// gradient ascent with a backtracking step reaches the global optimum.
/// Zero observed events yields the degenerate `(0, 0)` without failing.
pub fn fit_type(seqs: &[EventSeq], beta: f64) -> Result<TypeParams> {
    if beta <= 0.0 {
        return Err(Error::config("hawkes beta must be > 0"));
    }
    let n_events: usize = seqs.iter().map(|s| s.times.len()).sum();
    let total_t: f64 = seqs.iter().map(|s| s.duration).sum();
    if n_events == 0 {
        return Ok(TypeParams { mu: 0.0, alpha: 0.0 });
    }
    if total_t <= 0.0 {
        return Err(Error::data("hawkes sequences have zero total duration"));
    }
    let caches: Vec<SeqCache> = seqs
        .iter()
        .map(|s| cache_seq(s, beta))
        .collect::<Result<_>>()?;

    let rate = n_events as f64 / total_t;
    let mut mu = 0.5 * rate;
    let mut alpha = 0.2f64;
    let (mut ll, mut g_mu, mut g_alpha) = loglik_and_grad(&caches, mu, alpha, beta);
    let mut step = 0.1 / rate.max(1e-9);

    for _ in 0..MAX_ITERS {
        let mut improved = false;
        while step > 1e-14 {
            let mu_c = (mu + step * g_mu).max(0.0);
            let alpha_c = (alpha + step * g_alpha).clamp(0.0, ALPHA_MAX);
            let (ll_c, gm_c, ga_c) = loglik_and_grad(&caches, mu_c, alpha_c, beta);
            if ll_c > ll {
                let rel = (ll_c - ll).abs() / ll.abs().max(1.0);
                mu = mu_c;
                alpha = alpha_c;
                ll = ll_c;
                g_mu = gm_c;
                g_alpha = ga_c;
                step *= 1.2;
                improved = true;
                if rel < REL_TOL {
                    return Ok(TypeParams { mu, alpha });
                }
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(TypeParams { mu, alpha })
}

/// Fits every type independently; types run in parallel.
pub fn fit(per_type: &[Vec<EventSeq>], beta: f64) -> Result<HawkesParams> {
    let fitted = par_map(per_type, |seqs| fit_type(seqs, beta));
    let per_type = fitted.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(HawkesParams { beta, per_type })
}

/// Log-likelihood of sequences under `(μ, α, β)`.
pub fn log_likelihood(seqs: &[EventSeq], mu: f64, alpha: f64, beta: f64) -> Result<f64> {
    let caches: Vec<SeqCache> = seqs
        .iter()
        .map(|s| cache_seq(s, beta))
        .collect::<Result<_>>()?;
    Ok(loglik_and_grad(&caches, mu, alpha, beta).0)
}

/// End-of-window intensity vector: `lambdas[l] = λ*_l(t_end)` over the
/// window's own type-`l` events.
pub fn featurize_window(
    params: &HawkesParams,
    events_by_type: &[Vec<f64>],
    t_end: f64,
) -> Result<Vec<f32>> {
    if events_by_type.len() != params.per_type.len() {
        return Err(Error::data(format!(
            "featurize_window: {} event lanes for {} fitted types",
            events_by_type.len(),
            params.per_type.len()
        )));
    }
    let mut lambdas = Vec::with_capacity(params.per_type.len());
    for (tp, events) in params.per_type.iter().zip(events_by_type) {
        let lam = intensity_at(tp.mu, tp.alpha, params.beta, events, t_end)?;
        lambdas.push(lam as f32);
    }
    Ok(lambdas)
}

/// Plain-text persistence: `beta <v>` header, then one `<id> <mu> <alpha>`
/// line per type. Rust's shortest-roundtrip float formatting makes the
/// reload bit-exact.
pub fn save_params(params: &HawkesParams, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        writeln!(w, "beta {}", params.beta)?;
        for (id, tp) in params.per_type.iter().enumerate() {
            writeln!(w, "{id} {} {}", tp.mu, tp.alpha)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<HawkesParams> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::data("hawkes params file is empty"))??;
    let beta = header
        .strip_prefix("beta ")
        .and_then(|v| v.parse::<f64>().ok())
        .ok_or_else(|| Error::data("hawkes params header must be `beta <value>`"))?;
    let mut per_type = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let mut it = line.split_whitespace();
        let id: usize = it
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::data("bad hawkes params line"))?;
        if id != i {
            return Err(Error::data(format!(
                "hawkes params ids must be consecutive, got {id} at line {i}"
            )));
        }
        let mu: f64 = it
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::data("bad hawkes mu"))?;
        let alpha: f64 = it
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::data("bad hawkes alpha"))?;
        per_type.push(TypeParams { mu, alpha });
    }
    Ok(HawkesParams { beta, per_type })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_two_events() {
        // μ=0.5, α=0.2, β=1, events at 1 and 2, evaluated at 3:
        // 0.5 + 0.2·(e^{−2} + e^{−1})
        let lam = intensity_at(0.5, 0.2, 1.0, &[1.0, 2.0], 3.0).unwrap();
        let expect = 0.5 + 0.2 * ((-2.0f64).exp() + (-1.0f64).exp());
        assert!((lam - expect).abs() < 1e-12);
        assert!((lam - 0.6006).abs() < 1e-4);
    }

    #[test]
    fn no_events_gives_mu() {
        assert_eq!(intensity_at(0.7, 0.3, 2.0, &[], 5.0).unwrap(), 0.7);
    }

    #[test]
    fn zero_alpha_ignores_events() {
        let lam = intensity_at(0.4, 0.0, 1.0, &[0.1, 0.5, 2.0], 3.0).unwrap();
        assert_eq!(lam, 0.4);
    }

    #[test]
    fn unsorted_or_late_times_rejected() {
        assert!(intensity_at(0.5, 0.2, 1.0, &[2.0, 1.0], 3.0).is_err());
        assert!(intensity_at(0.5, 0.2, 1.0, &[1.0, 3.0], 3.0).is_err());
    }

    #[test]
    fn monotone_in_added_events() {
        let base = intensity_at(0.5, 0.3, 1.0, &[1.0, 2.0], 4.0).unwrap();
        let more = intensity_at(0.5, 0.3, 1.0, &[0.5, 1.0, 2.0], 4.0).unwrap();
        assert!(more > base);
    }

    #[test]
    fn zero_events_fit_is_degenerate() {
        let seqs = vec![EventSeq {
            times: vec![],
            duration: 30.0,
        }];
        let tp = fit_type(&seqs, 1.0).unwrap();
        assert_eq!(tp, TypeParams { mu: 0.0, alpha: 0.0 });
        assert!(tp.is_degenerate());
    }

    #[test]
    fn fitted_ll_dominates_poisson_fit() {
        // clustered events: a plain Poisson fit should lose to self-excitation
        let mut times = Vec::new();
        let mut t = 0.0;
        while t < 200.0 {
            times.push(t);
            times.push(t + 0.1);
            times.push(t + 0.25);
            t += 5.0;
        }
        let seqs = vec![EventSeq {
            times,
            duration: 200.0,
        }];
        let tp = fit_type(&seqs, 1.0).unwrap();
        let n = seqs[0].times.len() as f64;
        let mu_pois = n / 200.0;
        let ll_fit = log_likelihood(&seqs, tp.mu, tp.alpha, 1.0).unwrap();
        let ll_pois = log_likelihood(&seqs, mu_pois, 0.0, 1.0).unwrap();
        assert!(
            ll_fit >= ll_pois,
            "fit ll {ll_fit} should dominate poisson ll {ll_pois}"
        );
        assert!(tp.alpha > 0.1, "clustered data should show excitation");
    }

    #[test]
    fn featurize_empty_window_is_mu() {
        let params = HawkesParams {
            beta: 1.0,
            per_type: vec![
                TypeParams { mu: 0.3, alpha: 0.5 },
                TypeParams { mu: 0.0, alpha: 0.0 },
            ],
        };
        let lam = featurize_window(&params, &[vec![], vec![]], 30.0).unwrap();
        assert_eq!(lam, vec![0.3, 0.0]);
    }

    #[test]
    fn featurize_burst_exceeds_mu() {
        let params = HawkesParams {
            beta: 1.0,
            per_type: vec![TypeParams { mu: 0.3, alpha: 0.5 }],
        };
        let lam = featurize_window(&params, &[vec![29.0, 29.5, 29.9]], 30.0).unwrap();
        assert!(lam[0] > 0.3);
    }

    #[test]
    fn params_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hawkes.txt");
        let params = HawkesParams {
            beta: 1.0,
            per_type: vec![
                TypeParams {
                    mu: 0.123456789012345,
                    alpha: 0.987654321098765,
                },
                TypeParams { mu: 0.0, alpha: 0.0 },
            ],
        };
        save_params(&params, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(params, loaded);
    }
}
