//! Sampling a scalar complex Gaussian with nonzero relation.

use crate::autograd::{Tensor, Var};
use crate::ctensor::{CTensor, RTensor};
use crate::error::{shape_mismatch, Error, Result};

// Cholesky factor of the 2×2 covariance of (Re y, Im y) for variance `g` and relation `(cr, ci)`.
#[derive(Clone, Copy)]
struct Chol {
    vr: f64,
    cv: f64,
    l11: f64,
    l21: f64,
    l22: f64,
}

impl Chol {
    fn new(g: f64, cr: f64, ci: f64) -> Self {
        let vr = 0.5 * (g + cr);
        let vi = 0.5 * (g - cr);
        let cv = 0.5 * ci;
        if vr <= 0.0 {
            return Self {
                vr: 0.0,
                cv,
                l11: 0.0,
                l21: 0.0,
                l22: vi.max(0.0).sqrt(),
            };
        }
        let l11 = vr.sqrt();
        let l21 = cv / l11;
        let l22 = (vi - cv * cv / vr).max(0.0).sqrt();
        Self {
            vr,
            cv,
            l11,
            l21,
            l22,
        }
    }
}

/// Draws `y = mean + L (e1, e2)` where `L Lᵀ` is the real covariance implied by
/// variance `gamma` (real) and relation `rel` (complex); all shapes equal.
pub(crate) fn sample_with_relation<'t>(
    mean: Var<'t>,
    gamma: Var<'t>,
    rel: Var<'t>,
    e1: Vec<f64>,
    e2: Vec<f64>,
) -> Result<Var<'t>> {
    let (mv, gv, rv) = (mean.value(), gamma.value(), rel.value());
    let (m, g, r) = (mv.as_complex()?, gv.as_real()?, rv.as_complex()?);
    if m.shape() != g.shape() || m.shape() != r.shape() {
        return Err(shape_mismatch("sample_with_relation", m.shape(), g.shape()));
    }
    if e1.len() != m.len() || e2.len() != m.len() {
        return Err(Error::InvalidArgument(
            "noise length differs from output size".into(),
        ));
    }
    if let Some(bad) = g.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "negative output variance {bad}"
        )));
    }
    let chol: Vec<Chol> = (0..m.len())
        .map(|i| Chol::new(g.data()[i], r.re()[i], r.im()[i]))
        .collect();
    let (re, im) = (0..m.len())
        .map(|i| {
            let c = chol[i];
            (
                m.re()[i] + c.l11 * e1[i],
                m.im()[i] + c.l21 * e1[i] + c.l22 * e2[i],
            )
        })
        .unzip();
    let value = Tensor::Complex(CTensor::new(m.shape().to_vec(), re, im)?);
    let shape = m.shape().to_vec();
    let ids = (mean.id(), gamma.id(), rel.id());
    let needs = (
        mean.requires_grad(),
        gamma.requires_grad(),
        rel.requires_grad(),
    );
    let backward = Box::new(move |gy: &Tensor| -> Result<Vec<(usize, Tensor)>> {
        let gy = gy.as_complex()?;
        let mut out = Vec::new();
        if needs.0 {
            out.push((ids.0, gy.clone().into()));
        }
        if needs.1 || needs.2 {
            let n = chol.len();
            let (mut dg, mut dcr, mut dci) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for i in 0..n {
                let c = chol[i];
                let (gr, gi) = gy.get(i);
                let g22 = if c.l22 > 0.0 {
                    gi * e2[i] / (2.0 * c.l22)
                } else {
                    0.0
                };
                let (dvr, dcv) = if c.vr > 0.0 {
                    (
                        gr * e1[i] / (2.0 * c.l11) - gi * e1[i] * c.l21 / (2.0 * c.vr)
                            + g22 * c.cv * c.cv / (c.vr * c.vr),
                        gi * e1[i] / c.l11 - g22 * 2.0 * c.cv / c.vr,
                    )
                } else {
                    (0.0, 0.0)
                };
                let dvi = g22;
                dg[i] = 0.5 * (dvr + dvi);
                dcr[i] = 0.5 * (dvr - dvi);
                dci[i] = 0.5 * dcv;
            }
            if needs.1 {
                out.push((ids.1, RTensor::new(shape.clone(), dg)?.into()));
            }
            if needs.2 {
                out.push((ids.2, CTensor::new(shape.clone(), dcr, dci)?.into()));
            }
        }
        Ok(out)
    });
    Ok(mean.tape().custom(value, &[mean, gamma, rel], backward))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{gradcheck, ParamStore};

    #[test]
    fn gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let m = store.add(
            "m",
            CTensor::new(vec![3], vec![0.1, -0.4, 2.0], vec![1.0, 0.3, -0.2])
                .unwrap()
                .into(),
        );
        let g = store.add(
            "g",
            RTensor::new(vec![3], vec![1.0, 2.0, 0.5]).unwrap().into(),
        );
        let r = store.add(
            "r",
            CTensor::new(vec![3], vec![0.3, -0.5, 0.1], vec![0.4, 0.2, -0.3])
                .unwrap()
                .into(),
        );
        let e1 = vec![0.7, -1.2, 0.4];
        let e2 = vec![-0.3, 0.9, 1.5];
        let rep = gradcheck(
            &mut store,
            |t, s| {
                let y = sample_with_relation(
                    t.param(s, m),
                    t.param(s, g),
                    t.param(s, r),
                    e1.clone(),
                    e2.clone(),
                )?;
                Ok(y.abs2()?.sum())
            },
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn covariance_is_reproduced() {
        // L Lᵀ must equal [[vr, cv], [cv, vi]].
        let (g, cr, ci) = (2.0, 0.6, -0.8);
        let c = Chol::new(g, cr, ci);
        assert!((c.l11 * c.l11 - 0.5 * (g + cr)).abs() < 1e-14);
        assert!((c.l11 * c.l21 - 0.5 * ci).abs() < 1e-14);
        assert!((c.l21 * c.l21 + c.l22 * c.l22 - 0.5 * (g - cr)).abs() < 1e-14);
    }
}
