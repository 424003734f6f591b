//! Variational dense and convolutional layers with the local reparameterization trick.
//!
//! A layer owns three parameters in a [`ParamStore`]: the weight means `mu`,
//! the per-weight `log σ²` (for [`PenaltyKind::Rscale`] this slot stores
//! `log α` directly, the variance of the real multiplicative noise) and a
//! point-estimate bias.

mod penalty;
mod rscale;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub use penalty::{rvd_exact_derivative, PenaltyKind, PenaltySpec};

use crate::autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::ctensor::{CTensor, RTensor};
use crate::error::{shape_mismatch, Error, Result};

/// Floor added to `|μ|²` inside `log α`.
pub const EPS_NUM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Means only; `log σ²` is ignored.
    Deterministic,
    /// Output sampled through the local reparameterization trick.
    Stochastic,
    /// Deterministic with pruned means held at zero.
    Masked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Geometry {
    Linear,
    Conv2d { stride: usize },
}

/// A variational layer, dense or convolutional.
#[derive(Clone, Debug)]
pub struct VarLayer {
    name: String,
    geometry: Geometry,
    pub mu: ParamId,
    pub log_sigma2: ParamId,
    pub bias: ParamId,
    pub penalty: PenaltySpec,
    mode: Mode,
    mask: Option<Arc<RTensor>>,
}

fn gaussian_tensor<R: Rng + ?Sized>(
    shape: Vec<usize>,
    complex: bool,
    fan_in: usize,
    rng: &mut R,
) -> Tensor {
    let n: usize = shape.iter().product();
    let var = if complex { 0.5 } else { 1.0 } / fan_in as f64;
    let dist = Normal::new(0.0, var.sqrt()).expect("positive variance");
    let re: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    if complex {
        let im = (0..n).map(|_| dist.sample(rng)).collect();
        CTensor::new(shape, re, im).expect("sized").into()
    } else {
        RTensor::new(shape, re).expect("sized").into()
    }
}

fn zeros(shape: Vec<usize>, complex: bool) -> Tensor {
    if complex {
        CTensor::zeros(shape).into()
    } else {
        RTensor::zeros(shape).into()
    }
}

fn normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

impl VarLayer {
    fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        geometry: Geometry,
        shape: Vec<usize>,
        fan_in: usize,
        penalty: PenaltySpec,
        rng: &mut R,
    ) -> Self {
        let complex = penalty.kind.is_complex();
        let n_out = shape[0];
        let mu = store.add(
            format!("{name}.mu"),
            gaussian_tensor(shape.clone(), complex, fan_in, rng),
        );
        let log_sigma2 = store.add(format!("{name}.log_sigma2"), RTensor::zeros(shape).into());
        let bias = store.add(format!("{name}.bias"), zeros(vec![n_out], complex));
        let layer = Self {
            name: name.to_string(),
            geometry,
            mu,
            log_sigma2,
            bias,
            penalty,
            mode: Mode::Deterministic,
            mask: None,
        };
        layer
            .reset_log_alpha(store, -8.0)
            .expect("fresh layer has finite parameters");
        layer
    }

    /// Dense layer computing `x μᵀ + b` for `x`: [..., n_in].
    pub fn linear<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        penalty: PenaltySpec,
        rng: &mut R,
    ) -> Self {
        Self::build(
            store,
            name,
            Geometry::Linear,
            vec![n_out, n_in],
            n_in,
            penalty,
            rng,
        )
    }

    /// Valid convolution with a square `k×k` kernel.
    pub fn conv2d<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        penalty: PenaltySpec,
        rng: &mut R,
    ) -> Self {
        Self::build(
            store,
            name,
            Geometry::Conv2d { stride },
            vec![c_out, c_in, k, k],
            c_in * k * k,
            penalty,
            rng,
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn is_complex(&self) -> bool {
        self.penalty.kind.is_complex()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) -> Result<()> {
        if mode == Mode::Masked && self.mask.is_none() {
            return Err(Error::InvalidArgument(format!(
                "layer `{}` has no mask",
                self.name
            )));
        }
        self.mode = mode;
        Ok(())
    }

    /// Retained positions, if a mask has been applied.
    pub fn mask(&self) -> Option<Vec<bool>> {
        self.mask
            .as_ref()
            .map(|m| m.data().iter().map(|&v| v != 0.0).collect())
    }

    /// Installs `keep` (same layout as `mu`), zeroes pruned means and switches to masked mode.
    pub fn apply_mask(&mut self, store: &mut ParamStore, keep: &[bool]) -> Result<()> {
        let shape = store.value(self.mu).shape().to_vec();
        if keep.len() != store.value(self.mu).len() {
            return Err(shape_mismatch("apply_mask", &shape, &[keep.len()]));
        }
        let m = RTensor::new(
            shape,
            keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
        )?;
        self.mask = Some(Arc::new(m));
        self.mode = Mode::Masked;
        self.reapply_mask(store);
        Ok(())
    }

    /// Restores exact zeros at pruned positions (after an optimizer step).
    pub fn reapply_mask(&self, store: &mut ParamStore) {
        let Some(mask) = &self.mask else { return };
        let value = store.get_mut(self.mu).value_mut();
        for part in value.components_mut() {
            for (w, &m) in part.iter_mut().zip(mask.data()) {
                if m == 0.0 {
                    *w = 0.0;
                }
            }
        }
    }

    /// Sets `log σ²` so that every weight starts at `log α = la0`.
    pub fn reset_log_alpha(&self, store: &mut ParamStore, la0: f64) -> Result<()> {
        let new = match self.penalty.kind {
            PenaltyKind::Rscale => RTensor::full(store.value(self.mu).shape().to_vec(), la0),
            _ => self.abs2_mu(store)?.map(move |a| (a + EPS_NUM).ln() + la0),
        };
        store.get_mut(self.log_sigma2).set_value(new.into())
    }

    /// Clamps the stored `log σ²` (or `log α`) into `[lo, hi]`.
    pub fn clamp_log_sigma2(&self, store: &mut ParamStore, lo: f64, hi: f64) {
        for part in store.get_mut(self.log_sigma2).value_mut().components_mut() {
            part.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        }
    }

    fn abs2_mu(&self, store: &ParamStore) -> Result<RTensor> {
        Ok(match store.value(self.mu) {
            Tensor::Real(r) => r.map(|v| v * v),
            Tensor::Complex(c) => c.abs2(),
        })
    }

    /// `log σ² - log(|μ|² + ε)` per weight.
    pub fn log_alpha(&self, store: &ParamStore) -> Result<RTensor> {
        let ls = store.value(self.log_sigma2).as_real()?.clone();
        if self.penalty.kind == PenaltyKind::Rscale {
            return Ok(ls);
        }
        let a = self.abs2_mu(store)?;
        let data = ls
            .data()
            .iter()
            .zip(a.data())
            .map(|(l, a)| l - (a + EPS_NUM).ln())
            .collect();
        RTensor::new(ls.shape().to_vec(), data)
    }

    pub fn log_alpha_var<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<Var<'t>> {
        let ls = tape.param(store, self.log_sigma2);
        if self.penalty.kind == PenaltyKind::Rscale {
            return Ok(ls);
        }
        ls.sub(tape.param(store, self.mu).abs2()?.ln_shift(EPS_NUM)?)
    }

    /// Summed penalty over all weights, as a graph node.
    pub fn penalty_var<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<Var<'t>> {
        self.penalty.apply(self.log_alpha_var(tape, store)?)
    }

    pub fn penalty_value(&self, store: &ParamStore) -> Result<f64> {
        let la = self.log_alpha(store)?;
        if let Some(bad) = la.data().iter().find(|x| !x.is_finite()) {
            return Err(Error::Domain {
                what: "penalty log alpha",
                value: *bad,
                expected: "finite",
            });
        }
        Ok(la.data().iter().map(|&x| self.penalty.value(x)).sum())
    }

    fn apply_weight<'t>(&self, x: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
        match self.geometry {
            Geometry::Linear => x.matmul(w),
            Geometry::Conv2d { stride } => x.conv2d(w, stride),
        }
    }

    fn add_bias<'t>(&self, y: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        match self.geometry {
            Geometry::Linear => y.add(b),
            Geometry::Conv2d { .. } => y.add_channel_bias(b),
        }
    }

    fn effective_mu<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<Var<'t>> {
        let mu = tape.param(store, self.mu);
        match (&self.mask, self.mode) {
            (Some(m), Mode::Masked) => {
                let m = tape.constant((**m).clone());
                if self.is_complex() {
                    mu.mul_real(m)
                } else {
                    mu.mul(m)
                }
            }
            _ => Ok(mu),
        }
    }

    /// Layer output for the current mode. `rng` supplies the LRT noise and is
    /// untouched in deterministic and masked modes.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        rng: &mut R,
    ) -> Result<Var<'t>> {
        let mu = self.effective_mu(tape, store)?;
        let b = tape.param(store, self.bias);
        let mean = self.add_bias(self.apply_weight(x, mu)?, b)?;
        if self.mode != Mode::Stochastic {
            return Ok(mean);
        }
        let ls = tape.param(store, self.log_sigma2);
        let n = mean.value().len();
        match self.penalty.kind {
            PenaltyKind::Rscale => {
                let alpha = ls.exp()?;
                let gamma = self.apply_weight(x.abs2()?, mu.abs2()?.mul(alpha)?)?;
                let rel = self.apply_weight(x.square(), mu.square().mul_real(alpha)?)?;
                let e1 = normals(n, rng);
                let e2 = normals(n, rng);
                rscale::sample_with_relation(mean, gamma, rel, e1, e2)
            }
            kind => {
                let var = self.apply_weight(x.abs2()?, ls.exp()?)?;
                let e1 = normals(n, rng);
                let e2 = kind.is_complex().then(|| normals(n, rng));
                mean.lrt_sample(var, e1, e2)
            }
        }
    }

    /// Number of stored weight values (complex entries count twice).
    pub fn weight_floats(&self, store: &ParamStore) -> usize {
        store.value(self.mu).float_count()
    }

    pub fn bias_floats(&self, store: &ParamStore) -> usize {
        store.value(self.bias).float_count()
    }
}

#[cfg(test)]
mod tests;
