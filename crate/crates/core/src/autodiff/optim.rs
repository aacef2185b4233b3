//! Named parameter storage and gradient-descent steps.
//!
//! `ParamStore` keeps every trainable matrix under a stable name together
//! with its first/second moment accumulators and a freeze flag. Freezing is
//! how stage choreography locks modules: a frozen parameter enters the tape
//! as a constant (no gradient) and is never touched by an optimizer step.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tape::{Tape, Var};

pub type GradMap = BTreeMap<String, Matrix>;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub value: Matrix,
    pub frozen: bool,
    /// First-moment accumulator (Adam only).
    pub m: Matrix,
    /// Second-moment / running squared-gradient accumulator.
    pub v: Matrix,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let (r, c) = value.shape();
        self.entries.insert(
            name.into(),
            ParamEntry { value, frozen: false, m: Matrix::zeros(r, c), v: Matrix::zeros(r, c) },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.frozen).unwrap_or(false)
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.frozen = frozen;
            }
        }
    }

    pub fn unfreeze_all(&mut self) {
        for e in self.entries.values_mut() {
            e.frozen = false;
        }
    }

    /// Record a parameter on the tape: differentiable leaf when live,
    /// constant leaf when frozen.
    pub fn tape_var(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        Ok(if e.frozen {
            tape.constant(e.value.clone())
        } else {
            tape.param(e.value.clone())
        })
    }

    /// Read gradients for the named tape leaves. Unfrozen parameters that are
    /// disconnected from the loss get explicit zero gradients; frozen ones are
    /// omitted entirely.
    pub fn collect_grads(&self, tape: &Tape, vars: &BTreeMap<String, Var>) -> GradMap {
        let mut out = GradMap::new();
        for (name, var) in vars {
            let Some(e) = self.entries.get(name) else { continue };
            if e.frozen {
                continue;
            }
            let g = tape
                .grad(*var)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(e.value.rows(), e.value.cols()));
            out.insert(name.clone(), g);
        }
        out
    }

    fn check_cover(&self, grads: &GradMap) -> Result<()> {
        for (name, e) in &self.entries {
            if !e.frozen && !grads.contains_key(name) {
                return Err(Error::Contract(format!(
                    "missing gradient for unfrozen parameter {name}"
                )));
            }
        }
        Ok(())
    }
}

/// Shared optimizer hyperparameters. `beta1`/`beta2` drive Adam, `rho` drives
/// RMSprop, `l2_weight` is added to the gradient before any moment update.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub l2_weight: f64,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        OptimizerHyper {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            rho: 0.99,
            epsilon: 1e-8,
            l2_weight: 1e-5,
        }
    }
}

impl OptimizerHyper {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("rho", self.rho)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam update. `t` is the 1-based step index for the group of
/// parameters being stepped. Weight decay enters the gradient before the
/// moment update; frozen parameters are untouched even when a gradient for
/// them is supplied.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &GradMap,
    hyper: &OptimizerHyper,
    t: u64,
) -> Result<()> {
    hyper.validate()?;
    if t < 1 {
        return Err(Error::Contract("adam_step: step index t must be >= 1".into()));
    }
    params.check_cover(grads)?;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for (name, g) in grads {
        let Some(e) = params.entries.get_mut(name) else {
            return Err(Error::Contract(format!("gradient for unknown parameter {name}")));
        };
        if e.frozen {
            continue;
        }
        for i in 0..g.len() {
            let gi = g.as_slice()[i] + hyper.l2_weight * e.value.as_slice()[i];
            let m = &mut e.m.as_mut_slice()[i];
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * gi;
            let v = &mut e.v.as_mut_slice()[i];
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            e.value.as_mut_slice()[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
    }
    Ok(())
}

/// RMSprop update with running squared-gradient average of decay `rho`.
pub fn rmsprop_step(
    params: &mut ParamStore,
    grads: &GradMap,
    hyper: &OptimizerHyper,
    _t: u64,
) -> Result<()> {
    hyper.validate()?;
    params.check_cover(grads)?;
    for (name, g) in grads {
        let Some(e) = params.entries.get_mut(name) else {
            return Err(Error::Contract(format!("gradient for unknown parameter {name}")));
        };
        if e.frozen {
            continue;
        }
        for i in 0..g.len() {
            let gi = g.as_slice()[i] + hyper.l2_weight * e.value.as_slice()[i];
            let v = &mut e.v.as_mut_slice()[i];
            *v = hyper.rho * *v + (1.0 - hyper.rho) * gi * gi;
            e.value.as_mut_slice()[i] -= hyper.learning_rate * gi / (*v + hyper.epsilon).sqrt();
        }
    }
    Ok(())
}
