//! Central finite-difference comparison against tape gradients.

use super::{Gradients, ParamId, ParamStore};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub step: f64,
    pub relative: f64,
    /// Differences below this are accepted regardless of relative error.
    pub absolute: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-4,
            relative: 1e-3,
            absolute: 1e-6,
        }
    }
}

impl Tolerance {
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        diff < self.absolute || diff / analytic.abs().max(numeric.abs()) < self.relative
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub id: ParamId,
    pub name: String,
    pub elements: usize,
    pub failures: usize,
    pub worst_relative: f64,
    pub worst_absolute: f64,
}

impl TensorCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Perturbs every element of every parameter and compares the central
/// difference of `loss` with `analytic`.
pub fn check<F>(
    store: &ParamStore,
    analytic: &Gradients,
    tol: Tolerance,
    mut loss: F,
) -> Result<Vec<TensorCheck>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut probe = store.clone();
    let mut report = Vec::with_capacity(store.len());
    for id in store.ids() {
        let mut entry = TensorCheck {
            id,
            name: store.name(id).to_string(),
            elements: store.get(id).len(),
            failures: 0,
            worst_relative: 0.0,
            worst_absolute: 0.0,
        };
        for k in 0..store.get(id).len() {
            let original = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = original + tol.step;
            let plus = loss(&probe)?;
            probe.get_mut(id).data_mut()[k] = original - tol.step;
            let minus = loss(&probe)?;
            probe.get_mut(id).data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * tol.step);
            let exact = analytic.get(id).data()[k];
            let abs = (exact - numeric).abs();
            let scale = exact.abs().max(numeric.abs());
            if scale > 0.0 {
                entry.worst_relative = entry.worst_relative.max(abs / scale);
            }
            entry.worst_absolute = entry.worst_absolute.max(abs);
            if !tol.accepts(exact, numeric) {
                entry.failures += 1;
            }
        }
        report.push(entry);
    }
    Ok(report)
}
