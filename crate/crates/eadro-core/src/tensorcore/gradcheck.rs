//! Finite-difference gradient checking.
//!
//! The reverse-mode gradients of an f32 graph are compared against central
//! differences of the same graph re-evaluated in f64 (the f32 → f64 cast of
//! the parameters is exact, so both sides see the same function).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensorcore::scalar::Scalar;
use crate::tensorcore::store::ParameterStore;
use crate::tensorcore::tape::{Mode, NodeId, Tape};

/// A scalar-valued computation that can be rebuilt on any tape precision.
pub trait Program: Sync {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>) -> Result<NodeId>;
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step applied to the f64 copy of each coordinate.
    pub epsilon: f64,
    /// Cap on checked coordinates per parameter tensor; `None` checks all.
    pub max_coords_per_param: Option<usize>,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-3,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat coordinate where the maximum occurred.
    pub worst: (String, usize),
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients against central finite differences and
/// returns the maximum relative error
/// `|g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)` over the checked coordinates.
pub fn grad_check<P: Program>(
    prog: &P,
    store: &ParameterStore<f32>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    // Reverse-mode side at production precision.
    let mut tape = Tape::<f32>::new(Mode::Eval);
    let loss = prog.build(&mut tape, store)?;
    tape.backward(loss)?;

    let names = store.trainable_names();
    let mut grads: Vec<(String, Vec<f32>)> = Vec::with_capacity(names.len());
    for name in &names {
        let node = tape
            .param_node(name)
            .ok_or_else(|| Error::data(format!("program never used parameter {name:?}")))?;
        let g = tape
            .grad(node)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(name).map(|t| t.len()).unwrap_or(0)]);
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("grad_check"));
        }
        grads.push((name.clone(), g));
    }

    let base64 = store.cast::<f64>();
    let per_param: Vec<Result<(f64, usize, usize)>> = crate::par::par_map(&grads, |(name, g)| {
        let tensor = base64.get(name)?;
        let len = tensor.len();
        let mut coords: Vec<usize> = (0..len).collect();
        if let Some(cap) = opts.max_coords_per_param {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ hash_name(name));
            coords.shuffle(&mut rng);
            coords.truncate(cap);
            coords.sort_unstable();
        }
        let mut local = base64.clone();
        let mut worst = (0.0f64, 0usize);
        for &c in &coords {
            let orig = local.get(name)?.data()[c];
            let fd = {
                let mut eval = |v: f64| -> Result<f64> {
                    let mut t = local.get(name)?.clone();
                    t.data_mut()[c] = v;
                    local.set(name, t)?;
                    let mut tape = Tape::<f64>::new(Mode::Eval);
                    let out = prog.build(&mut tape, &local)?;
                    Ok(tape.value(out).item())
                };
                let hi = eval(orig + opts.epsilon)?;
                let lo = eval(orig - opts.epsilon)?;
                let mut t = local.get(name)?.clone();
                t.data_mut()[c] = orig;
                local.set(name, t)?;
                (hi - lo) / (2.0 * opts.epsilon)
            };
            let ad = g[c] as f64;
            let rel = (ad - fd).abs() / (1e-8f64).max(ad.abs() + fd.abs());
            if rel > worst.0 {
                worst = (rel, c);
            }
        }
        Ok((worst.0, worst.1, coords.len()))
    });

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (String::new(), 0),
        coords_checked: 0,
    };
    for (res, (name, _)) in per_param.into_iter().zip(grads.iter()) {
        let (rel, coord, n) = res?;
        report.coords_checked += n;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (name.clone(), coord);
        }
    }
    Ok(report)
}

fn hash_name(name: &str) -> u64 {
    // FNV-1a, just to decorrelate per-parameter sampling.
    let mut h = 0xcbf29ce484222325u64;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
