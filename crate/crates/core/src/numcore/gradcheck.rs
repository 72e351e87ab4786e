use std::fmt;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Relative tolerance on `|analytic − numeric| / max(|analytic|, |numeric|)`.
    pub rel_tol: f64,
    /// Absolute differences below this always pass.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    /// Largest relative error over coordinates whose absolute error exceeds
    /// the floor; 0 when every coordinate is under the floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst_abs_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_abs_error)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<24} n={:<5} max_rel={:.3e} max_abs={:.3e} {}",
                p.name,
                p.coords,
                p.max_rel_error,
                p.max_abs_error,
                if p.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn evaluate<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(store, &mut g)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::dim("grad_check", v.shape(), &[1]));
    }
    Ok(v.item())
}

/// Compares the tape gradient of a scalar objective against central finite
/// differences, coordinate by coordinate, for every parameter in `store`.
///
/// `f` must build the objective on the supplied graph from the supplied
/// store. Parameter values are restored before returning.
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    if opts.step <= 0.0 {
        return Err(Error::Contract(format!(
            "step must be positive, got {}",
            opts.step
        )));
    }
    let first = evaluate(store, &mut f)?;
    let second = evaluate(store, &mut f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    store.zero_grad();
    let mut g = Graph::new();
    let out = f(store, &mut g)?;
    g.backward(out, store)?;

    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = store.get(id).grad.clone();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut passed = true;
        for i in 0..analytic.numel() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + opts.step;
            let plus = evaluate(store, &mut f);
            store.get_mut(id).value.data_mut()[i] = orig - opts.step;
            let minus = evaluate(store, &mut f);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            max_abs = max_abs.max(abs);
            if abs > opts.abs_floor {
                let rel = abs / a.abs().max(numeric.abs());
                max_rel = max_rel.max(rel);
                if rel > opts.rel_tol {
                    passed = false;
                }
            }
        }
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            coords: analytic.numel(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed,
        });
    }
    store.zero_grad();
    Ok(GradCheckReport { params })
}
