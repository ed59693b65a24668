//! Central finite-difference gradient checks.
//!
//! Numerical derivatives are computed only from forward values on fresh
//! tapes, so they stay independent of the reverse pass being checked.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;

use super::{ParamId, ParamStore, Result, Tape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradTolerance {
    pub relative: f64,
    pub absolute: f64,
}

impl Default for GradTolerance {
    fn default() -> Self {
        Self { relative: 1e-4, absolute: 1e-6 }
    }
}

/// Comparison of one analytic gradient entry with its numerical estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub label: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

impl GradEntry {
    pub fn abs_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }

    /// `|analytic − numeric| / (|analytic| + 1e-8)`
    pub fn rel_error(&self) -> f64 {
        self.abs_error() / (self.analytic.abs() + 1e-8)
    }

    pub fn passes(&self, tol: GradTolerance) -> bool {
        self.abs_error() <= tol.absolute || self.rel_error() <= tol.relative
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn checked(&self) -> usize {
        self.entries.len()
    }

    pub fn passes(&self, tol: GradTolerance) -> bool {
        self.entries.iter().all(|e| e.passes(tol))
    }

    /// Largest relative error over all entries.
    pub fn max_relative(&self) -> f64 {
        self.entries.iter().map(GradEntry::rel_error).fold(0.0, f64::max)
    }

    /// Largest relative error among entries whose absolute error exceeds the
    /// absolute tolerance; these are the entries the relative bound decides.
    pub fn worst_relative(&self, tol: GradTolerance) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.abs_error() > tol.absolute)
            .map(GradEntry::rel_error)
            .fold(0.0, f64::max)
    }

    pub fn max_absolute(&self) -> f64 {
        self.entries.iter().map(GradEntry::abs_error).fold(0.0, f64::max)
    }

    pub fn failures(&self, tol: GradTolerance) -> impl Iterator<Item = &GradEntry> {
        self.entries.iter().filter(move |e| !e.passes(tol))
    }

    pub fn extend(&mut self, other: GradReport) {
        self.entries.extend(other.entries);
    }
}

fn central(f: &mut impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Checks the gradient of `loss(tape, x)` with respect to every entry of `x0`.
pub fn check_tensor_grad(
    x0: &Array2<f64>,
    h: f64,
    loss: impl Fn(&mut Tape, Tensor) -> Tensor,
) -> GradReport {
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let l = loss(&mut tape, x);
    tape.backward(l).expect("scalar loss");
    let analytic = tape.grad(x).cloned().unwrap_or_else(|| Array2::zeros(x0.raw_dim()));

    let mut entries = Vec::new();
    for idx in ndarray::indices(x0.raw_dim()) {
        let mut eval = |v: f64| {
            let mut xp = x0.clone();
            xp[idx] = v;
            let mut t = Tape::new();
            let xv = t.leaf(xp, false);
            let l = loss(&mut t, xv);
            t.item(l)
        };
        let numeric = central(&mut eval, x0[idx], h);
        entries.push(GradEntry { label: "x".into(), index: idx, analytic: analytic[idx], numeric });
    }
    GradReport { entries }
}

/// Checks parameter gradients of `loss(tape, store)`.
///
/// Up to `max_per_param` entries are drawn per parameter (all entries when the
/// parameter is smaller). `None` checks everything.
pub fn check_param_grads<R: Rng>(
    store: &ParamStore,
    params: &[ParamId],
    h: f64,
    max_per_param: Option<usize>,
    rng: &mut R,
    loss: impl Fn(&mut Tape, &ParamStore) -> Result<Tensor>,
) -> Result<GradReport> {
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    tape.backward(l)?;
    let mut grads = store.clone();
    grads.zero_grad();
    grads.accumulate_grads(&tape);

    let mut probe = store.clone();
    let mut entries = Vec::new();
    for &id in params {
        let value = store.value(id);
        let total = value.len();
        let picks: Vec<usize> = match max_per_param {
            Some(k) if k < total => {
                let mut v = sample(rng, total, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..total).collect(),
        };
        let cols = value.ncols();
        for flat in picks {
            let idx = (flat / cols, flat % cols);
            let base = value[idx];
            let mut eval = |v: f64| {
                probe.value_mut(id)[idx] = v;
                let mut t = Tape::new();
                let l = loss(&mut t, &probe).expect("loss evaluated once already");
                t.item(l)
            };
            let numeric = central(&mut eval, base, h);
            probe.value_mut(id)[idx] = base;
            entries.push(GradEntry {
                label: store.name(id).to_string(),
                index: idx,
                analytic: grads.grad(id)[idx],
                numeric,
            });
        }
    }
    Ok(GradReport { entries })
}
