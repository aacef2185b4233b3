//! Central finite-difference gradient oracle.
//!
//! Independent of the tape: it only re-evaluates a loss closure at perturbed
//! parameter values and compares against a supplied analytic gradient.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::{GradMap, ParamStore};

/// Max over checked coordinates of |analytic - numeric| / max(1e-8, |a|+|n|).
///
/// Perturbs every coordinate of every unfrozen parameter. `f` must be a pure
/// function of the parameter values.
pub fn finite_diff_check(
    f: impl Fn(&ParamStore) -> f64,
    params: &ParamStore,
    analytic: &GradMap,
    eps: f64,
) -> Result<f64> {
    check_coords(f, params, analytic, eps, None)
}

/// Like [`finite_diff_check`] but probing only `coords_per_param` seeded
/// random coordinates of each parameter, for wide networks where the full
/// sweep is too slow.
pub fn finite_diff_check_sampled(
    f: impl Fn(&ParamStore) -> f64,
    params: &ParamStore,
    analytic: &GradMap,
    eps: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<f64> {
    check_coords(f, params, analytic, eps, Some((coords_per_param, seed)))
}

fn check_coords(
    f: impl Fn(&ParamStore) -> f64,
    params: &ParamStore,
    analytic: &GradMap,
    eps: f64,
    sample: Option<(usize, u64)>,
) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("fd eps must be in [1e-7, 1e-4], got {eps}")));
    }
    let mut rng = sample.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let names: Vec<String> = params
        .names()
        .filter(|n| !params.is_frozen(n))
        .map(String::from)
        .collect();
    let mut worst = 0.0f64;
    let mut scratch = params.clone();
    for name in &names {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no analytic gradient for {name}")))?;
        let n_coords = grad.len();
        let coords: Vec<usize> = match (&mut rng, sample) {
            (Some(r), Some((k, _))) if k < n_coords => {
                (0..k).map(|_| r.random_range(0..n_coords)).collect()
            }
            _ => (0..n_coords).collect(),
        };
        for idx in coords {
            let original = scratch.get(name).unwrap().as_slice()[idx];
            set_coord(&mut scratch, name, idx, original + eps);
            let up = f(&scratch);
            set_coord(&mut scratch, name, idx, original - eps);
            let down = f(&scratch);
            set_coord(&mut scratch, name, idx, original);
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.as_slice()[idx];
            let err = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn set_coord(store: &mut ParamStore, name: &str, idx: usize, v: f64) {
    let m = store.get(name).unwrap().clone();
    let mut m2 = m;
    m2.as_mut_slice()[idx] = v;
    let frozen = store.is_frozen(name);
    // Re-insert keeps moments zeroed; irrelevant for pure loss evaluation.
    store.insert(name.to_string(), m2);
    if frozen {
        store.set_frozen(name, true);
    }
}
