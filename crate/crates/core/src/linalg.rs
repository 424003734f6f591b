//! Dense real and complex matrix products over row-major `f64` buffers.
//!
//! The inner kernel is `matrixmultiply::dgemm`. Output rows are cut into
//! blocks of [`ROW_BLOCK`] rows that are dispatched through [`crate::exec`],
//! so every output element is produced by the same kernel call regardless of
//! whether the blocks run in parallel.

use crate::exec;

pub(crate) const ROW_BLOCK: usize = 32;

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)`: m×k and `op(b)`: k×n.
///
/// `ta`/`tb` select the transposed storage: with `ta` the buffer `a` holds a
/// k×m matrix; with `tb` the buffer `b` holds an n×k matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    exec::for_each_chunk_mut(c, ROW_BLOCK * n, |bi, cblk| {
        let rows = cblk.len() / n;
        let r0 = bi * ROW_BLOCK;
        let (a_off, rsa, csa) = if ta {
            (r0, 1, m as isize)
        } else {
            (r0 * k, k as isize, 1)
        };
        if k == 0 {
            cblk.iter_mut().for_each(|x| *x *= beta);
            return;
        }
        // SAFETY: the strides describe the in-bounds region of `a` (rows r0..r0+rows
        // of op(a)), all of `b`, and the `rows × n` block `cblk`.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                alpha,
                a.as_ptr().add(a_off),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                cblk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Borrowed complex matrix as a (re, im) pair of row-major buffers.
#[derive(Clone, Copy)]
pub(crate) struct CMat<'a> {
    pub re: &'a [f64],
    pub im: &'a [f64],
    /// Imaginary part known to be identically zero.
    pub im_zero: bool,
}

impl<'a> CMat<'a> {
    pub fn new(re: &'a [f64], im: &'a [f64]) -> Self {
        let im_zero = im.iter().all(|&v| v == 0.0);
        Self { re, im, im_zero }
    }
}

/// Complex product `op(a) * op(b)` written through the real block form
/// `(P u - Q v, P v + Q u)`; `conj_*` conjugates an operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn zgemm(
    m: usize,
    k: usize,
    n: usize,
    a: CMat<'_>,
    ta: bool,
    conj_a: bool,
    b: CMat<'_>,
    tb: bool,
    conj_b: bool,
) -> (Vec<f64>, Vec<f64>) {
    let sa = if conj_a { -1.0 } else { 1.0 };
    let sb = if conj_b { -1.0 } else { 1.0 };
    let mut re = vec![0.0; m * n];
    let mut im = vec![0.0; m * n];
    dgemm(m, k, n, 1.0, a.re, ta, b.re, tb, 0.0, &mut re);
    if !a.im_zero && !b.im_zero {
        dgemm(m, k, n, -sa * sb, a.im, ta, b.im, tb, 1.0, &mut re);
    }
    if !b.im_zero {
        dgemm(m, k, n, sb, a.re, ta, b.im, tb, 0.0, &mut im);
    }
    if !a.im_zero {
        dgemm(m, k, n, sa, a.im, ta, b.re, tb, 1.0, &mut im);
    }
    (re, im)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    s += av * bv;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn dgemm_matches_naive_for_all_transposes() {
        let (m, k, n) = (70, 13, 9);
        let a: Vec<f64> = (0..m * k)
            .map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0)
            .collect();
        let b: Vec<f64> = (0..k * n)
            .map(|i| ((i * 104729) % 97) as f64 / 40.0 - 1.2)
            .collect();
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            dgemm(m, k, n, 1.0, &a, ta, &b, tb, 0.0, &mut c);
            let want = naive(m, k, n, &a, ta, &b, tb);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "{ta} {tb}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn zero_inner_dimension_scales_output() {
        let mut c = vec![2.0; 6];
        dgemm(2, 0, 3, 1.0, &[], false, &[], false, 0.5, &mut c);
        assert_eq!(c, vec![1.0; 6]);
    }
}
