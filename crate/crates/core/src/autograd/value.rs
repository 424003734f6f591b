use crate::ctensor::{CTensor, RTensor};
use crate::error::{shape_mismatch, Error, Result};

/// A real or complex tensor flowing through the tape.
///
/// Gradients of complex values use the conjugate convention: the gradient of
/// a real loss `L` with respect to `z = u + jv` is stored as `∂L/∂u + j ∂L/∂v`.
#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    Real(RTensor),
    Complex(CTensor),
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::Real(t) => t.shape(),
            Tensor::Complex(t) => t.shape(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Tensor::Real(t) => t.len(),
            Tensor::Complex(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_complex(&self) -> bool {
        matches!(self, Tensor::Complex(_))
    }

    /// Number of stored floats (two per complex entry).
    pub fn float_count(&self) -> usize {
        if self.is_complex() {
            2 * self.len()
        } else {
            self.len()
        }
    }

    pub fn as_real(&self) -> Result<&RTensor> {
        match self {
            Tensor::Real(t) => Ok(t),
            Tensor::Complex(_) => Err(Error::Autograd(
                "expected a real tensor, found complex".into(),
            )),
        }
    }

    pub fn as_complex(&self) -> Result<&CTensor> {
        match self {
            Tensor::Complex(t) => Ok(t),
            Tensor::Real(_) => Err(Error::Autograd(
                "expected a complex tensor, found real".into(),
            )),
        }
    }

    pub fn zeros_like(&self) -> Tensor {
        match self {
            Tensor::Real(t) => Tensor::Real(RTensor::zeros(t.shape().to_vec())),
            Tensor::Complex(t) => Tensor::Complex(CTensor::zeros(t.shape().to_vec())),
        }
    }

    /// Flat component buffers: `[data]` for real, `[re, im]` for complex.
    pub fn components(&self) -> Vec<&[f64]> {
        match self {
            Tensor::Real(t) => vec![t.data()],
            Tensor::Complex(t) => vec![t.re(), t.im()],
        }
    }

    pub fn components_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Tensor::Real(t) => vec![t.data_mut()],
            Tensor::Complex(t) => {
                let (r, i) = t.parts_mut();
                vec![r, i]
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.components()
            .iter()
            .all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub fn sum_squares(&self) -> f64 {
        self.components()
            .iter()
            .flat_map(|c| c.iter())
            .map(|v| v * v)
            .sum()
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for c in self.components_mut() {
            c.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() || self.is_complex() != other.is_complex() {
            return Err(shape_mismatch(
                "gradient accumulation",
                self.shape(),
                other.shape(),
            ));
        }
        for (d, s) in self.components_mut().into_iter().zip(other.components()) {
            d.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }
}

impl From<RTensor> for Tensor {
    fn from(t: RTensor) -> Self {
        Tensor::Real(t)
    }
}

impl From<CTensor> for Tensor {
    fn from(t: CTensor) -> Self {
        Tensor::Complex(t)
    }
}
