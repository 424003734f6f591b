//! Two-dimensional DFT by direct summation with precomputed twiddle tables.
//!
//! Sizes here are small (28×28 images), so an O(N) sum per output bin along
//! each axis is fast enough and avoids any power-of-two restriction.

use std::f64::consts::PI;

use super::{numel, CTensor, RTensor};
use crate::error::{Error, Result};
use crate::exec;

/// Scaling applied by the transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DftNorm {
    /// Plain sums, `X[0,0] = Σ x`.
    #[default]
    None,
    /// Unitary scaling by `1/√(HW)`.
    Ortho,
}

impl DftNorm {
    fn factor(self, h: usize, w: usize) -> f64 {
        match self {
            DftNorm::None => 1.0,
            DftNorm::Ortho => 1.0 / ((h * w) as f64).sqrt(),
        }
    }
}

struct Twiddles {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Twiddles {
    fn new(n: usize) -> Self {
        let (cos, sin) = (0..n)
            .map(|j| {
                let t = 2.0 * PI * j as f64 / n as f64;
                (t.cos(), t.sin())
            })
            .unzip();
        Self { cos, sin }
    }
}

// One-dimensional transform of `len` values read with `stride`; sign -1 is the forward DFT.
fn dft_line(
    re: &[f64],
    im: &[f64],
    len: usize,
    stride: usize,
    tw: &Twiddles,
    sign: f64,
    out_re: &mut [f64],
    out_im: &mut [f64],
) {
    for k in 0..len {
        let (mut sr, mut si) = (0.0, 0.0);
        for n in 0..len {
            let idx = (k * n) % len;
            let (c, s) = (tw.cos[idx], sign * tw.sin[idx]);
            let (xr, xi) = (re[n * stride], im[n * stride]);
            sr += xr * c - xi * s;
            si += xr * s + xi * c;
        }
        out_re[k] = sr;
        out_im[k] = si;
    }
}

fn transform_plane(
    re: &[f64],
    im: &[f64],
    h: usize,
    w: usize,
    sign: f64,
    scale: f64,
    tw_h: &Twiddles,
    tw_w: &Twiddles,
    out_re: &mut [f64],
    out_im: &mut [f64],
) {
    let mut row_re = vec![0.0; h * w];
    let mut row_im = vec![0.0; h * w];
    for y in 0..h {
        let (a, b) = (&re[y * w..(y + 1) * w], &im[y * w..(y + 1) * w]);
        let (oa, ob) = (y * w, (y + 1) * w);
        let (rr, ri) = (&mut row_re[oa..ob], &mut row_im[oa..ob]);
        dft_line(a, b, w, 1, tw_w, sign, rr, ri);
    }
    let mut col_re = vec![0.0; h];
    let mut col_im = vec![0.0; h];
    for x in 0..w {
        dft_line(
            &row_re[x..],
            &row_im[x..],
            h,
            w,
            tw_h,
            sign,
            &mut col_re,
            &mut col_im,
        );
        for y in 0..h {
            out_re[y * w + x] = col_re[y] * scale;
            out_im[y * w + x] = col_im[y] * scale;
        }
    }
}

// Moves bin (p, q) to ((p + h/2) mod h, (q + w/2) mod w), or back when `undo`.
fn half_shift(re: &[f64], im: &[f64], h: usize, w: usize, undo: bool) -> (Vec<f64>, Vec<f64>) {
    let mut or = vec![0.0; re.len()];
    let mut oi = vec![0.0; im.len()];
    let planes = re.len() / (h * w);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            for x in 0..w {
                let (ty, tx) = ((y + h / 2) % h, (x + w / 2) % w);
                let (src, dst) = if undo {
                    (base + ty * w + tx, base + y * w + x)
                } else {
                    (base + y * w + x, base + ty * w + tx)
                };
                or[dst] = re[src];
                oi[dst] = im[src];
            }
        }
    }
    (or, oi)
}

/// 2d DFT over the two trailing axes.
///
/// With `adjoint` the conjugate-transpose of the (optionally centered) forward
/// map is applied instead: un-shift first, then the `e^{+j...}` sum. The
/// adjoint is what back-propagation through the forward transform needs.
pub fn dft2d(x: &CTensor, centered: bool, adjoint: bool, norm: DftNorm) -> Result<CTensor> {
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 1] == 0 || s[s.len() - 2] == 0 {
        return Err(Error::InvalidShape {
            op: "dft2d",
            shape: s.to_vec(),
            reason: "need two non-empty trailing axes".into(),
        });
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = numel(&s[..s.len() - 2]);
    let (tw_h, tw_w) = (Twiddles::new(h), Twiddles::new(w));
    let scale = norm.factor(h, w);
    let sign = if adjoint { 1.0 } else { -1.0 };

    let (src_re, src_im) = if centered && adjoint {
        half_shift(x.re(), x.im(), h, w, true)
    } else {
        (x.re().to_vec(), x.im().to_vec())
    };
    let mut out_re = vec![0.0; planes * h * w];
    let mut out_im = vec![0.0; planes * h * w];
    exec::for_each_chunk_pair_mut(&mut out_re, &mut out_im, h * w, |p, ore, oim| {
        let r = p * h * w..(p + 1) * h * w;
        transform_plane(
            &src_re[r.clone()],
            &src_im[r],
            h,
            w,
            sign,
            scale,
            &tw_h,
            &tw_w,
            ore,
            oim,
        );
    });
    if centered && !adjoint {
        let (r, i) = half_shift(&out_re, &out_im, h, w, false);
        out_re = r;
        out_im = i;
    }
    CTensor::new(s.to_vec(), out_re, out_im)
}

/// Centered DFT of a real image: frequency (0, 0) lands at `(⌊H/2⌋, ⌊W/2⌋)`.
pub fn dft2d_centered(x: &RTensor, norm: DftNorm) -> Result<CTensor> {
    dft2d(&x.to_complex(), true, false, norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_single_centered_peak() {
        let (h, w, c) = (5, 6, 0.75);
        let x = RTensor::full(vec![h, w], c);
        let y = dft2d_centered(&x, DftNorm::None).unwrap();
        for i in 0..h * w {
            let (re, im) = y.get(i);
            if i == (h / 2) * w + w / 2 {
                assert!((re - (h * w) as f64 * c).abs() < 1e-9 && im.abs() < 1e-9);
            } else {
                assert!(re.abs() < 1e-9 && im.abs() < 1e-9, "bin {i}: {re} {im}");
            }
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut d = vec![0.0; 28 * 28];
        d[0] = 1.0;
        let y = dft2d_centered(&RTensor::new(vec![28, 28], d).unwrap(), DftNorm::None).unwrap();
        assert!(y.abs2().data().iter().all(|m| (m - 1.0).abs() < 1e-12));
    }

    #[test]
    fn adjoint_of_ortho_centered_is_inverse() {
        let x = CTensor::new(
            vec![2, 3, 4],
            (0..24).map(|v| (v as f64).sin()).collect(),
            (0..24).map(|v| (v as f64 * 0.3).cos()).collect(),
        )
        .unwrap();
        let y = dft2d(&x, true, false, DftNorm::Ortho).unwrap();
        let back = dft2d(&y, true, true, DftNorm::Ortho).unwrap();
        for i in 0..x.len() {
            assert!((x.re()[i] - back.re()[i]).abs() < 1e-12);
            assert!((x.im()[i] - back.im()[i]).abs() < 1e-12);
        }
    }
}
