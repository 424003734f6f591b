//! Valid (unpadded) 2d convolution via im2col, average pooling and explicit zero padding.

use super::{numel, CTensor, RTensor};
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{self, CMat};

/// Geometry of a valid 2d convolution over an NCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    /// Input carried no batch axis (`[c, H, W]`).
    pub unbatched: bool,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], k_shape: &[usize], stride: usize) -> Result<Self> {
        let (batch, c_in, h, w, unbatched) = match *x_shape {
            [c, h, w] => (1, c, h, w, true),
            [b, c, h, w] => (b, c, h, w, false),
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    shape: x_shape.to_vec(),
                    reason: "expected [c, H, W] or [B, c, H, W]".into(),
                })
            }
        };
        let [c_out, kc, kh, kw] = *k_shape else {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: k_shape.to_vec(),
                reason: "kernel must be [out, in, kh, kw]".into(),
            });
        };
        if kc != c_in {
            return Err(crate::error::shape_mismatch("conv2d", k_shape, x_shape));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if kh > h || kw > w || kh == 0 || kw == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: k_shape.to_vec(),
                reason: format!("kernel larger than the {h}x{w} input"),
            });
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
            unbatched,
        })
    }

    /// Rows of the im2col matrix (one per output pixel per image).
    pub fn rows(&self) -> usize {
        self.batch * self.oh * self.ow
    }

    /// Columns of the im2col matrix (flattened patch length).
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_shape(&self) -> Vec<usize> {
        if self.unbatched {
            vec![self.c_out, self.oh, self.ow]
        } else {
            vec![self.batch, self.c_out, self.oh, self.ow]
        }
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (patch, per_img) = (g.patch(), g.oh * g.ow * g.patch());
    let mut cols = vec![0.0; g.rows() * patch];
    exec::for_each_chunk_mut(&mut cols, per_img, |b, chunk| {
        let img = &x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = &mut chunk[(oy * g.ow + ox) * patch..(oy * g.ow + ox + 1) * patch];
                let mut p = 0;
                for c in 0..g.c_in {
                    for ky in 0..g.kh {
                        let src = c * g.h * g.w + (oy * g.stride + ky) * g.w + ox * g.stride;
                        row[p..p + g.kw].copy_from_slice(&img[src..src + g.kw]);
                        p += g.kw;
                    }
                }
            }
        }
    });
    cols
}

pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (patch, img_len) = (g.patch(), g.c_in * g.h * g.w);
    let mut x = vec![0.0; g.batch * img_len];
    exec::for_each_chunk_mut(&mut x, img_len, |b, img| {
        let base = b * g.oh * g.ow * patch;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = &cols[base + (oy * g.ow + ox) * patch..][..patch];
                let mut p = 0;
                for c in 0..g.c_in {
                    for ky in 0..g.kh {
                        let dst = c * g.h * g.w + (oy * g.stride + ky) * g.w + ox * g.stride;
                        for (d, s) in img[dst..dst + g.kw].iter_mut().zip(&row[p..p + g.kw]) {
                            *d += s;
                        }
                        p += g.kw;
                    }
                }
            }
        }
    });
    x
}

/// `[B·oh·ow, o]` rows into NCHW `[B, o, oh, ow]`.
pub(crate) fn rows_to_nchw(rows: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.oh * g.ow;
    let mut out = vec![0.0; rows.len()];
    exec::for_each_chunk_mut(&mut out, g.c_out * hw, |b, img| {
        for o in 0..g.c_out {
            for p in 0..hw {
                img[o * hw + p] = rows[(b * hw + p) * g.c_out + o];
            }
        }
    });
    out
}

pub(crate) fn nchw_to_rows(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.oh * g.ow;
    let mut out = vec![0.0; x.len()];
    exec::for_each_chunk_mut(&mut out, hw * g.c_out, |b, rows| {
        for p in 0..hw {
            for o in 0..g.c_out {
                rows[p * g.c_out + o] = x[b * g.c_out * hw + o * hw + p];
            }
        }
    });
    out
}

/// Complex valid convolution; each output position is the ℂ-linear map of the
/// flattened kernel applied to the flattened patch.
pub fn cconv2d(kernel: &CTensor, x: &CTensor, stride: usize) -> Result<CTensor> {
    let g = ConvGeom::new(x.shape(), kernel.shape(), stride)?;
    let cre = im2col(x.re(), &g);
    let cim = im2col(x.im(), &g);
    let (yr, yi) = linalg::zgemm(
        g.rows(),
        g.patch(),
        g.c_out,
        CMat::new(&cre, &cim),
        false,
        false,
        kernel.as_cmat(),
        true,
        false,
    );
    CTensor::new(g.out_shape(), rows_to_nchw(&yr, &g), rows_to_nchw(&yi, &g))
}

/// Real valid convolution.
pub fn rconv2d(kernel: &RTensor, x: &RTensor, stride: usize) -> Result<RTensor> {
    let g = ConvGeom::new(x.shape(), kernel.shape(), stride)?;
    let cols = im2col(x.data(), &g);
    let mut y = vec![0.0; g.rows() * g.c_out];
    linalg::dgemm(
        g.rows(),
        g.patch(),
        g.c_out,
        1.0,
        &cols,
        false,
        kernel.data(),
        true,
        0.0,
        &mut y,
    );
    RTensor::new(g.out_shape(), rows_to_nchw(&y, &g))
}

/// Average pooling over the two trailing axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(shape: &[usize], k: usize, stride: usize) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::InvalidShape {
                op: "avg_pool2d",
                shape: shape.to_vec(),
                reason: "need at least two axes".into(),
            });
        }
        if k == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "avg_pool2d window and stride must be >= 1".into(),
            ));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if k > h || k > w {
            return Err(Error::InvalidShape {
                op: "avg_pool2d",
                shape: shape.to_vec(),
                reason: format!("window {k} exceeds spatial extent"),
            });
        }
        Ok(Self {
            planes: numel(&shape[..shape.len() - 2]),
            h,
            w,
            k,
            stride,
            oh: (h - k) / stride + 1,
            ow: (w - k) / stride + 1,
        })
    }

    pub fn out_shape(&self, shape: &[usize]) -> Vec<usize> {
        let mut s = shape[..shape.len() - 2].to_vec();
        s.extend([self.oh, self.ow]);
        s
    }
}

fn pool_plane(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let inv = 1.0 / (g.k * g.k) as f64;
    let mut out = vec![0.0; g.planes * g.oh * g.ow];
    exec::for_each_chunk_mut(&mut out, g.oh * g.ow, |p, o| {
        let plane = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut s = 0.0;
                for ky in 0..g.k {
                    let row = (oy * g.stride + ky) * g.w + ox * g.stride;
                    s += plane[row..row + g.k].iter().sum::<f64>();
                }
                o[oy * g.ow + ox] = s * inv;
            }
        }
    });
    out
}

pub(crate) fn avg_pool_backward(gy: &[f64], g: &PoolGeom) -> Vec<f64> {
    let inv = 1.0 / (g.k * g.k) as f64;
    let mut gx = vec![0.0; g.planes * g.h * g.w];
    exec::for_each_chunk_mut(&mut gx, g.h * g.w, |p, plane| {
        let go = &gy[p * g.oh * g.ow..(p + 1) * g.oh * g.ow];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let v = go[oy * g.ow + ox] * inv;
                for ky in 0..g.k {
                    let row = (oy * g.stride + ky) * g.w + ox * g.stride;
                    plane[row..row + g.k].iter_mut().for_each(|d| *d += v);
                }
            }
        }
    });
    gx
}

/// Windowed mean over the trailing two axes, applied to re and im independently.
pub fn avg_pool2d(x: &CTensor, k: usize, stride: usize) -> Result<CTensor> {
    let g = PoolGeom::new(x.shape(), k, stride)?;
    CTensor::new(
        g.out_shape(x.shape()),
        pool_plane(x.re(), &g),
        pool_plane(x.im(), &g),
    )
}

pub fn avg_pool2d_real(x: &RTensor, k: usize, stride: usize) -> Result<RTensor> {
    let g = PoolGeom::new(x.shape(), k, stride)?;
    RTensor::new(g.out_shape(x.shape()), pool_plane(x.data(), &g))
}

/// Zero padding of the trailing two axes by `pad` on every side.
pub fn zero_pad2d(x: &CTensor, pad: usize) -> Result<CTensor> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::InvalidShape {
            op: "zero_pad2d",
            shape: s.to_vec(),
            reason: "need at least two axes".into(),
        });
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let planes = numel(&s[..s.len() - 2]);
    let pad_part = |src: &[f64]| {
        let mut out = vec![0.0; planes * ph * pw];
        for p in 0..planes {
            for y in 0..h {
                let d = p * ph * pw + (y + pad) * pw + pad;
                out[d..d + w].copy_from_slice(&src[p * h * w + y * w..][..w]);
            }
        }
        out
    };
    let mut shape = s[..s.len() - 2].to_vec();
    shape.extend([ph, pw]);
    CTensor::new(shape, pad_part(x.re()), pad_part(x.im()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_unit_kernel_is_identity() {
        let x = CTensor::new(
            vec![1, 3, 3],
            (0..9).map(f64::from).collect(),
            (0..9).map(|v| -(v as f64)).collect(),
        )
        .unwrap();
        let k = CTensor::new(vec![1, 1, 1, 1], vec![1.0], vec![0.0]).unwrap();
        assert_eq!(cconv2d(&k, &x, 1).unwrap(), x);
    }

    #[test]
    fn centered_j_delta_rotates() {
        let x = CTensor::new(
            vec![1, 4, 4],
            (0..16).map(|v| v as f64 * 0.5).collect(),
            (0..16).map(|v| 1.0 - v as f64).collect(),
        )
        .unwrap();
        let mut kim = vec![0.0; 9];
        kim[4] = 1.0;
        let k = CTensor::new(vec![1, 1, 3, 3], vec![0.0; 9], kim).unwrap();
        let y = cconv2d(&k, &x, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        for oy in 0..2 {
            for ox in 0..2 {
                let src = (oy + 1) * 4 + ox + 1;
                assert_eq!(y.re()[oy * 2 + ox], -x.im()[src]);
                assert_eq!(y.im()[oy * 2 + ox], x.re()[src]);
            }
        }
    }

    #[test]
    fn kernel_larger_than_input() {
        let x = CTensor::zeros(vec![1, 2, 2]);
        let k = CTensor::zeros(vec![1, 1, 3, 3]);
        assert!(matches!(
            cconv2d(&k, &x, 1),
            Err(Error::InvalidShape { .. })
        ));
    }

    #[test]
    fn pooling_examples() {
        let x = RTensor::new(vec![2, 2], vec![1.0, 3.0, 5.0, 7.0])
            .unwrap()
            .to_complex();
        assert_eq!(avg_pool2d(&x, 2, 2).unwrap().re(), &[4.0]);
        let c = CTensor::new(vec![3, 3], vec![2.5; 9], vec![-1.0; 9]).unwrap();
        let p = avg_pool2d(&c, 2, 1).unwrap();
        assert!(p.re().iter().all(|&v| v == 2.5) && p.im().iter().all(|&v| v == -1.0));
        assert!(avg_pool2d(&x, 3, 1).is_err());
    }

    #[test]
    fn padding_embeds_centered() {
        let x = CTensor::new(vec![1, 1], vec![2.0], vec![3.0]).unwrap();
        let p = zero_pad2d(&x, 1).unwrap();
        assert_eq!(p.shape(), &[3, 3]);
        assert_eq!(p.re()[4], 2.0);
        assert_eq!(p.im().iter().sum::<f64>(), 3.0);
    }
}
