//! Complex tensors stored as paired real arrays (ℂ ≃ ℝ²).
//!
//! A [`CTensor`] keeps its real and imaginary parts in two separate buffers of
//! identical shape; an [`RTensor`] is a single real buffer and carries
//! variances, squared moduli and masks. All complex arithmetic is written on
//! the real pairs, e.g. a linear map `W = P + jQ` acts on `x = u + jv` as
//! `(Pu - Qv, Pv + Qu)`.
//!
//! Broadcasting is intentionally narrow: equal shapes, a single-element
//! operand, or an operand whose shape is a trailing suffix of the other's.
//! Anything else is a [`Error::ShapeMismatch`].

mod conv;
mod dft;

pub use conv::{avg_pool2d, avg_pool2d_real, cconv2d, rconv2d, zero_pad2d, ConvGeom, PoolGeom};
pub(crate) use conv::{avg_pool_backward, col2im, im2col, nchw_to_rows, rows_to_nchw};
pub use dft::{dft2d, dft2d_centered, DftNorm};

use crate::error::{shape_mismatch, Error, Result};
use crate::exec;
use crate::linalg::{self, CMat};

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Real tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct RTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Complex tensor with split real/imaginary storage.
#[derive(Clone, Debug, PartialEq)]
pub struct CTensor {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl RTensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "RTensor::new",
                shape,
                reason: format!("buffer holds {} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let data = vec![value; numel(&shape)];
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(shape_mismatch("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync + Send) -> Self {
        Self {
            shape: self.shape.clone(),
            data: exec::map_slice(&self.data, f),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Embeds into ℂ with zero imaginary part.
    pub fn to_complex(&self) -> CTensor {
        CTensor {
            shape: self.shape.clone(),
            re: self.data.clone(),
            im: vec![0.0; self.data.len()],
        }
    }

    pub fn add(&self, other: &RTensor) -> Result<RTensor> {
        let (shape, data) = zip_broadcast(
            "add",
            &self.shape,
            &self.data,
            &other.shape,
            &other.data,
            |a, b| a + b,
        )?;
        Ok(RTensor { shape, data })
    }

    pub fn mul(&self, other: &RTensor) -> Result<RTensor> {
        let (shape, data) = zip_broadcast(
            "mul",
            &self.shape,
            &self.data,
            &other.shape,
            &other.data,
            |a, b| a * b,
        )?;
        Ok(RTensor { shape, data })
    }

    pub fn relu(&self) -> RTensor {
        self.map(|v| v.max(0.0))
    }
}

impl CTensor {
    pub fn new(shape: impl Into<Vec<usize>>, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n = numel(&shape);
        if re.len() != n || im.len() != n {
            return Err(Error::InvalidShape {
                op: "CTensor::new",
                shape,
                reason: format!("re holds {} values, im holds {}", re.len(), im.len()),
            });
        }
        Ok(Self { shape, re, im })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn scalar(re: f64, im: f64) -> Self {
        Self {
            shape: Vec::new(),
            re: vec![re],
            im: vec![im],
        }
    }

    /// Builds from interleaved `(re, im)` pairs.
    pub fn from_pairs(shape: impl Into<Vec<usize>>, values: &[(f64, f64)]) -> Result<Self> {
        let re = values.iter().map(|v| v.0).collect();
        let im = values.iter().map(|v| v.1).collect();
        Self::new(shape, re, im)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.re, &mut self.im)
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
        (self.shape, self.re, self.im)
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn get(&self, i: usize) -> (f64, f64) {
        (self.re[i], self.im[i])
    }

    pub fn real_part(&self) -> RTensor {
        RTensor {
            shape: self.shape.clone(),
            data: self.re.clone(),
        }
    }

    pub fn imag_part(&self) -> RTensor {
        RTensor {
            shape: self.shape.clone(),
            data: self.im.clone(),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.re.len() {
            return Err(shape_mismatch("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|v| v.is_finite())
    }

    pub(crate) fn as_cmat(&self) -> CMat<'_> {
        CMat::new(&self.re, &self.im)
    }

    pub fn conj(&self) -> CTensor {
        CTensor {
            shape: self.shape.clone(),
            re: self.re.clone(),
            im: self.im.iter().map(|v| -v).collect(),
        }
    }

    /// Squared modulus `re² + im²`.
    pub fn abs2(&self) -> RTensor {
        let data = self
            .re
            .iter()
            .zip(&self.im)
            .map(|(a, b)| a * a + b * b)
            .collect();
        RTensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Elementwise complex square `z²`.
    pub fn square(&self) -> CTensor {
        let (re, im) = self
            .re
            .iter()
            .zip(&self.im)
            .map(|(a, b)| (a * a - b * b, 2.0 * a * b))
            .unzip();
        CTensor {
            shape: self.shape.clone(),
            re,
            im,
        }
    }

    pub fn scale(&self, re: f64, im: f64) -> CTensor {
        let (r, i) = self
            .re
            .iter()
            .zip(&self.im)
            .map(|(a, b)| (a * re - b * im, a * im + b * re))
            .unzip();
        CTensor {
            shape: self.shape.clone(),
            re: r,
            im: i,
        }
    }

    pub fn add(&self, other: &CTensor) -> Result<CTensor> {
        cadd(self, other)
    }

    pub fn sub(&self, other: &CTensor) -> Result<CTensor> {
        csub(self, other)
    }

    pub fn mul(&self, other: &CTensor) -> Result<CTensor> {
        cmul(self, other)
    }
}

/// Output shape and whether each operand is repeated, under the narrow rules
/// described in the module docs.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (na, nb) = (numel(a), numel(b));
    if nb == 1 {
        return Ok(a.to_vec());
    }
    if na == 1 {
        return Ok(b.to_vec());
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(shape_mismatch(op, a, b))
}

// Suffix and scalar broadcasting both reduce to indexing the smaller operand modulo its length.
fn zip_broadcast(
    op: &'static str,
    sa: &[usize],
    a: &[f64],
    sb: &[usize],
    b: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let shape = broadcast_shape(op, sa, sb)?;
    let n = numel(&shape);
    let data = (0..n).map(|i| f(a[i % a.len()], b[i % b.len()])).collect();
    Ok((shape, data))
}

fn czip(
    op: &'static str,
    a: &CTensor,
    b: &CTensor,
    f: impl Fn((f64, f64), (f64, f64)) -> (f64, f64),
) -> Result<CTensor> {
    let shape = broadcast_shape(op, &a.shape, &b.shape)?;
    let n = numel(&shape);
    let (la, lb) = (a.len(), b.len());
    let (re, im) = (0..n).map(|i| f(a.get(i % la), b.get(i % lb))).unzip();
    Ok(CTensor { shape, re, im })
}

pub fn cadd(a: &CTensor, b: &CTensor) -> Result<CTensor> {
    czip("cadd", a, b, |(ar, ai), (br, bi)| (ar + br, ai + bi))
}

pub fn csub(a: &CTensor, b: &CTensor) -> Result<CTensor> {
    czip("csub", a, b, |(ar, ai), (br, bi)| (ar - br, ai - bi))
}

pub fn cmul(a: &CTensor, b: &CTensor) -> Result<CTensor> {
    czip("cmul", a, b, |(ar, ai), (br, bi)| {
        (ar * br - ai * bi, ar * bi + ai * br)
    })
}

pub fn conj(a: &CTensor) -> CTensor {
    a.conj()
}

pub fn abs2(a: &CTensor) -> RTensor {
    a.abs2()
}

/// Planar ReLU: `σ(Re z) + jσ(Im z)`.
pub fn crelu(x: &CTensor) -> CTensor {
    CTensor {
        shape: x.shape.clone(),
        re: exec::map_slice(&x.re, |v| v.max(0.0)),
        im: exec::map_slice(&x.im, |v| v.max(0.0)),
    }
}

fn matmul_dims(
    op: &'static str,
    w: &[usize],
    x: &[usize],
) -> Result<(usize, usize, usize, Vec<usize>)> {
    if w.len() != 2 || x.is_empty() || x[x.len() - 1] != w[1] {
        return Err(shape_mismatch(op, w, x));
    }
    let (n, m) = (w[0], w[1]);
    let batch = numel(&x[..x.len() - 1]);
    let mut out = x[..x.len() - 1].to_vec();
    out.push(n);
    Ok((batch, n, m, out))
}

/// `W x` for `W`: n×m and `x`: [..., m], applied over all leading axes of `x`.
pub fn cmatmul(w: &CTensor, x: &CTensor) -> Result<CTensor> {
    let (batch, n, m, shape) = matmul_dims("cmatmul", &w.shape, &x.shape)?;
    let (re, im) = linalg::zgemm(
        batch,
        m,
        n,
        x.as_cmat(),
        false,
        false,
        w.as_cmat(),
        true,
        false,
    );
    Ok(CTensor { shape, re, im })
}

/// Real counterpart of [`cmatmul`].
pub fn rmatmul(w: &RTensor, x: &RTensor) -> Result<RTensor> {
    let (batch, n, m, shape) = matmul_dims("rmatmul", &w.shape, &x.shape)?;
    let mut data = vec![0.0; batch * n];
    linalg::dgemm(
        batch, m, n, 1.0, &x.data, false, &w.data, true, 0.0, &mut data,
    );
    Ok(RTensor { shape, data })
}
