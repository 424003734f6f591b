//! Central finite-difference check of reverse-mode gradients.

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Per-parameter comparison.
#[derive(Clone, Debug)]
pub struct GradcheckRow {
    pub name: String,
    pub id: ParamId,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_rel_err < self.tol)
    }
}

// Gradients smaller than this are treated as zero when forming relative errors.
const REL_FLOOR: f64 = 1e-8;

/// Compares the gradients of `f` with central differences on every real
/// component (real and imaginary parts perturbed independently) of every
/// trainable parameter. `f` must be deterministic.
pub fn gradcheck<F>(store: &mut ParamStore, f: F, eps: f64, tol: f64) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    if !(eps > 1e-8 && eps < 1e-2) {
        return Err(Error::Domain {
            what: "gradcheck eps",
            value: eps,
            expected: "1e-8 < eps < 1e-2",
        });
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        f(&tape, store)?.scalar()
    };
    let analytic = {
        let tape = Tape::new();
        f(&tape, store)?.backward()?
    };
    let ids: Vec<ParamId> = store
        .ids()
        .filter(|&id| store.get(id).requires_grad)
        .collect();
    let mut rows = Vec::with_capacity(ids.len());
    for id in ids {
        let zeros = store.value(id).zeros_like();
        let grad = analytic.get(id).cloned().unwrap_or(zeros);
        let mut numeric = grad.zeros_like();
        let parts = grad.components().len();
        for part in 0..parts {
            let n = store.value(id).len();
            for i in 0..n {
                let orig = store.value(id).components()[part][i];
                store.get_mut(id).value_mut().components_mut()[part][i] = orig + eps;
                let up = eval(store);
                store.get_mut(id).value_mut().components_mut()[part][i] = orig - eps;
                let down = eval(store);
                store.get_mut(id).value_mut().components_mut()[part][i] = orig;
                numeric.components_mut()[part][i] = (up? - down?) / (2.0 * eps);
            }
        }
        let mut max_abs = 0.0f64;
        let mut scale = REL_FLOOR;
        for (a, n) in grad.components().iter().zip(numeric.components()) {
            for (x, y) in a.iter().zip(n) {
                max_abs = max_abs.max((x - y).abs());
                scale = scale.max(y.abs()).max(x.abs());
            }
        }
        rows.push(GradcheckRow {
            name: store.get(id).name.clone(),
            id,
            max_abs_err: max_abs,
            max_rel_err: max_abs / scale,
        });
    }
    Ok(GradcheckReport { rows, tol })
}
