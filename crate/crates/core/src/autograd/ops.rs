//! Differentiable operations on [`Var`].

use std::sync::Arc;

use super::{Tensor, Var};
use crate::ctensor::{
    self, avg_pool_backward, col2im, im2col, nchw_to_rows, rows_to_nchw, CTensor, ConvGeom,
    DftNorm, PoolGeom, RTensor,
};
use crate::error::{shape_mismatch, Error, Result};
use crate::exec;
use crate::linalg::{self, CMat};

// Sums `g` into `len` slots by index modulo `len` (undoes suffix/scalar broadcasting).
fn reduce_mod(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for (i, v) in g.iter().enumerate() {
        out[i % len] += v;
    }
    out
}

fn real(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::Real(RTensor::new(shape, data).expect("shape matches buffer"))
}

fn cplx(shape: Vec<usize>, re: Vec<f64>, im: Vec<f64>) -> Tensor {
    Tensor::Complex(CTensor::new(shape, re, im).expect("shape matches buffer"))
}

fn kind_mismatch(op: &str) -> Error {
    Error::Autograd(format!("{op}: operands must both be real or both complex"))
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Autograd(
                "operands recorded on different tapes".into(),
            ))
        }
    }

    fn elementwise(
        self,
        other: Var<'t>,
        op: &'static str,
        mul: bool,
        sign: f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (av, bv) = (self.value(), other.value());
        let shape = ctensor::broadcast_shape(op, av.shape(), bv.shape())?;
        let n = ctensor::numel(&shape);
        let (la, lb) = (av.len(), bv.len());
        let (ia, ib) = (self.id, other.id);
        let (ga, gb) = (self.requires_grad(), other.requires_grad());
        let value = match (&*av, &*bv) {
            (Tensor::Real(a), Tensor::Real(b)) => {
                let (a, b) = (a.data(), b.data());
                let data = (0..n)
                    .map(|i| {
                        if mul {
                            a[i % la] * b[i % lb]
                        } else {
                            a[i % la] + sign * b[i % lb]
                        }
                    })
                    .collect();
                real(shape.clone(), data)
            }
            (Tensor::Complex(a), Tensor::Complex(b)) => {
                let (re, im) = (0..n)
                    .map(|i| {
                        let (ar, ai) = a.get(i % la);
                        let (br, bi) = b.get(i % lb);
                        if mul {
                            (ar * br - ai * bi, ar * bi + ai * br)
                        } else {
                            (ar + sign * br, ai + sign * bi)
                        }
                    })
                    .unzip();
                cplx(shape.clone(), re, im)
            }
            _ => return Err(kind_mismatch(op)),
        };
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            let mut out = Vec::new();
            match g {
                Tensor::Real(g) => {
                    let g = g.data();
                    let (a, b) = (av.as_real()?.data(), bv.as_real()?.data());
                    if ga {
                        let full: Vec<f64> = if mul {
                            (0..g.len()).map(|i| g[i] * b[i % lb]).collect()
                        } else {
                            g.to_vec()
                        };
                        out.push((ia, real(av.shape().to_vec(), reduce_mod(&full, la))));
                    }
                    if gb {
                        let full: Vec<f64> = if mul {
                            (0..g.len()).map(|i| g[i] * a[i % la]).collect()
                        } else {
                            g.iter().map(|v| sign * v).collect()
                        };
                        out.push((ib, real(bv.shape().to_vec(), reduce_mod(&full, lb))));
                    }
                }
                Tensor::Complex(g) => {
                    let (a, b) = (av.as_complex()?, bv.as_complex()?);
                    // d(a·b): grad_a = conj(b)·G, grad_b = conj(a)·G.
                    let contrib = |other: &CTensor, lo: usize, s: f64| -> (Vec<f64>, Vec<f64>) {
                        (0..g.len())
                            .map(|i| {
                                let (gr, gi) = g.get(i);
                                if mul {
                                    let (or, oi) = other.get(i % lo);
                                    (or * gr + oi * gi, or * gi - oi * gr)
                                } else {
                                    (s * gr, s * gi)
                                }
                            })
                            .unzip()
                    };
                    if ga {
                        let (r, i) = contrib(b, lb, 1.0);
                        out.push((
                            ia,
                            cplx(av.shape().to_vec(), reduce_mod(&r, la), reduce_mod(&i, la)),
                        ));
                    }
                    if gb {
                        let (r, i) = contrib(a, la, sign);
                        out.push((
                            ib,
                            cplx(bv.shape().to_vec(), reduce_mod(&r, lb), reduce_mod(&i, lb)),
                        ));
                    }
                }
            }
            Ok(out)
        });
        Ok(self.tape.custom(value, &[self, other], backward))
    }

    /// Elementwise sum with narrow broadcasting (scalar or trailing suffix).
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", false, 1.0)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", false, -1.0)
    }

    /// Elementwise product (complex product for complex operands).
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", true, 1.0)
    }

    /// Complex tensor scaled elementwise by a real tensor (broadcast allowed on the real side).
    pub fn mul_real(self, r: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&r)?;
        let (cv, rv) = (self.value(), r.value());
        let c = cv.as_complex()?;
        let rr = rv.as_real()?;
        let shape = ctensor::broadcast_shape("mul_real", c.shape(), rr.shape())?;
        if shape != c.shape() {
            return Err(shape_mismatch("mul_real", c.shape(), rr.shape()));
        }
        let lr = rr.len();
        let (re, im) = (0..c.len())
            .map(|i| {
                let s = rr.data()[i % lr];
                (c.re()[i] * s, c.im()[i] * s)
            })
            .unzip();
        let value = cplx(shape, re, im);
        let (ic, ir, gc, gr) = (self.id, r.id, self.requires_grad(), r.requires_grad());
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            let g = g.as_complex()?;
            let (c, rr) = (cv.as_complex()?, rv.as_real()?);
            let mut out = Vec::new();
            if gc {
                let (re, im) = (0..g.len())
                    .map(|i| {
                        let s = rr.data()[i % lr];
                        (g.re()[i] * s, g.im()[i] * s)
                    })
                    .unzip();
                out.push((ic, cplx(c.shape().to_vec(), re, im)));
            }
            if gr {
                let full: Vec<f64> = (0..g.len())
                    .map(|i| c.re()[i] * g.re()[i] + c.im()[i] * g.im()[i])
                    .collect();
                out.push((ir, real(rr.shape().to_vec(), reduce_mod(&full, lr))));
            }
            Ok(out)
        });
        Ok(self.tape.custom(value, &[self, r], backward))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value();
        let mut value = (*v).clone();
        value.scale_in_place(s);
        let id = self.id;
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            let mut g = g.clone();
            g.scale_in_place(s);
            Ok(vec![(id, g)])
        });
        self.tape.custom(value, &[self], backward)
    }

    /// Sum of all entries; complex inputs sum to a complex scalar.
    pub fn sum(self) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let value = match &*v {
            Tensor::Real(r) => real(vec![1], vec![r.sum()]),
            Tensor::Complex(c) => cplx(
                vec![1],
                vec![c.re().iter().sum()],
                vec![c.im().iter().sum()],
            ),
        };
        let id = self.id;
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            let n = ctensor::numel(&shape);
            Ok(vec![(
                id,
                match g {
                    Tensor::Real(g) => real(shape.clone(), vec![g.data()[0]; n]),
                    Tensor::Complex(g) => {
                        cplx(shape.clone(), vec![g.re()[0]; n], vec![g.im()[0]; n])
                    }
                },
            )])
        });
        self.tape.custom(value, &[self], backward)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let v = self.value();
        let old = v.shape().to_vec();
        let value = match &*v {
            Tensor::Real(r) => Tensor::Real(r.clone().reshape(shape)?),
            Tensor::Complex(c) => Tensor::Complex(c.clone().reshape(shape)?),
        };
        let id = self.id;
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            Ok(vec![(
                id,
                match g {
                    Tensor::Real(g) => Tensor::Real(g.clone().reshape(old.clone())?),
                    Tensor::Complex(g) => Tensor::Complex(g.clone().reshape(old.clone())?),
                },
            )])
        });
        Ok(self.tape.custom(value, &[self], backward))
    }

    /// `[B, d1, d2, ...]` to `[B, d1·d2·…]`.
    pub fn flatten_batch(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::InvalidShape {
                op: "flatten_batch",
                shape: s,
                reason: "needs a batch axis".into(),
            });
        }
        let rest = ctensor::numel(&s[1..]);
        self.reshape(vec![s[0], rest])
    }

    /// `x Wᵀ` for `x`: [..., m] and `W`: [n, m].
    pub fn matmul(self, w: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&w)?;
        let (xv, wv) = (self.value(), w.value());
        let (ws, xs) = (wv.shape().to_vec(), xv.shape().to_vec());
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[1] {
            return Err(shape_mismatch("matmul", &xs, &ws));
        }
        let (n, m) = (ws[0], ws[1]);
        let rows = ctensor::numel(&xs[..xs.len() - 1]);
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        out_shape.push(n);
        let value = match (&*xv, &*wv) {
            (Tensor::Real(x), Tensor::Real(wt)) => {
                let mut y = vec![0.0; rows * n];
                linalg::dgemm(
                    rows,
                    m,
                    n,
                    1.0,
                    x.data(),
                    false,
                    wt.data(),
                    true,
                    0.0,
                    &mut y,
                );
                real(out_shape, y)
            }
            (Tensor::Complex(x), Tensor::Complex(wt)) => {
                let (r, i) = linalg::zgemm(
                    rows,
                    m,
                    n,
                    x.as_cmat(),
                    false,
                    false,
                    wt.as_cmat(),
                    true,
                    false,
                );
                cplx(out_shape, r, i)
            }
            _ => return Err(kind_mismatch("matmul")),
        };
        let (ix, iw, gx, gw) = (self.id, w.id, self.requires_grad(), w.requires_grad());
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            let mut out = Vec::new();
            match (g, &*xv, &*wv) {
                (Tensor::Real(g), Tensor::Real(x), Tensor::Real(wt)) => {
                    if gx {
                        let mut d = vec![0.0; rows * m];
                        linalg::dgemm(
                            rows,
                            n,
                            m,
                            1.0,
                            g.data(),
                            false,
                            wt.data(),
                            false,
                            0.0,
                            &mut d,
                        );
                        out.push((ix, real(xs.clone(), d)));
                    }
                    if gw {
                        let mut d = vec![0.0; n * m];
                        linalg::dgemm(
                            n,
                            rows,
                            m,
                            1.0,
                            g.data(),
                            true,
                            x.data(),
                            false,
                            0.0,
                            &mut d,
                        );
                        out.push((iw, real(ws.clone(), d)));
                    }
                }
                (Tensor::Complex(g), Tensor::Complex(x), Tensor::Complex(wt)) => {
                    let gm = g.as_cmat();
                    if gx {
                        // ∇x = G · conj(W)
                        let (r, i) =
                            linalg::zgemm(rows, n, m, gm, false, false, wt.as_cmat(), false, true);
                        out.push((ix, cplx(xs.clone(), r, i)));
                    }
                    if gw {
                        // ∇W = Gᵀ · conj(x)
                        let (r, i) =
                            linalg::zgemm(n, rows, m, gm, true, false, x.as_cmat(), false, true);
                        out.push((iw, cplx(ws.clone(), r, i)));
                    }
                }
                _ => return Err(kind_mismatch("matmul backward")),
            }
            Ok(out)
        });
        Ok(self.tape.custom(value, &[self, w], backward))
    }

    /// Valid 2d convolution of `self` ([c,H,W] or [B,c,H,W]) with `kernel` [o,c,kh,kw].
    pub fn conv2d(self, kernel: Var<'t>, stride: usize) -> Result<Var<'t>> {
        self.same_tape(&kernel)?;
        let (xv, kv) = (self.value(), kernel.value());
        let geom = ConvGeom::new(xv.shape(), kv.shape(), stride)?;
        let (rows, patch, co) = (geom.rows(), geom.patch(), geom.c_out);
        let (xs, ks) = (xv.shape().to_vec(), kv.shape().to_vec());
        let (value, cols) = match (&*xv, &*kv) {
            (Tensor::Real(x), Tensor::Real(k)) => {
                let cols = im2col(x.data(), &geom);
                let mut y = vec![0.0; rows * co];
                linalg::dgemm(
                    rows,
                    patch,
                    co,
                    1.0,
                    &cols,
                    false,
                    k.data(),
                    true,
                    0.0,
                    &mut y,
                );
                (
                    real(geom.out_shape(), rows_to_nchw(&y, &geom)),
                    (cols, Vec::new()),
                )
            }
            (Tensor::Complex(x), Tensor::Complex(k)) => {
                let (cr, ci) = (im2col(x.re(), &geom), im2col(x.im(), &geom));
                let (yr, yi) = linalg::zgemm(
                    rows,
                    patch,
                    co,
                    CMat::new(&cr, &ci),
                    false,
                    false,
                    k.as_cmat(),
                    true,
                    false,
                );
                (
                    cplx(
                        geom.out_shape(),
                        rows_to_nchw(&yr, &geom),
                        rows_to_nchw(&yi, &geom),
                    ),
                    (cr, ci),
                )
            }
            _ => return Err(kind_mismatch("conv2d")),
        };
        let cols = Arc::new(cols);
        let (ix, ik, gx, gk) = (
            self.id,
            kernel.id,
            self.requires_grad(),
            kernel.requires_grad(),
        );
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            let mut out = Vec::new();
            match (g, &*kv) {
                (Tensor::Real(g), Tensor::Real(k)) => {
                    let gr = nchw_to_rows(g.data(), &geom);
                    if gk {
                        let mut d = vec![0.0; co * patch];
                        linalg::dgemm(co, rows, patch, 1.0, &gr, true, &cols.0, false, 0.0, &mut d);
                        out.push((ik, real(ks.clone(), d)));
                    }
                    if gx {
                        let mut dc = vec![0.0; rows * patch];
                        linalg::dgemm(
                            rows,
                            co,
                            patch,
                            1.0,
                            &gr,
                            false,
                            k.data(),
                            false,
                            0.0,
                            &mut dc,
                        );
                        out.push((ix, real(xs.clone(), col2im(&dc, &geom))));
                    }
                }
                (Tensor::Complex(g), Tensor::Complex(k)) => {
                    let (gr, gi) = (nchw_to_rows(g.re(), &geom), nchw_to_rows(g.im(), &geom));
                    let gm = CMat::new(&gr, &gi);
                    if gk {
                        let (r, i) = linalg::zgemm(
                            co,
                            rows,
                            patch,
                            gm,
                            true,
                            false,
                            CMat::new(&cols.0, &cols.1),
                            false,
                            true,
                        );
                        out.push((ik, cplx(ks.clone(), r, i)));
                    }
                    if gx {
                        let (r, i) = linalg::zgemm(
                            rows,
                            co,
                            patch,
                            gm,
                            false,
                            false,
                            k.as_cmat(),
                            false,
                            true,
                        );
                        out.push((ix, cplx(xs.clone(), col2im(&r, &geom), col2im(&i, &geom))));
                    }
                }
                _ => return Err(kind_mismatch("conv2d backward")),
            }
            Ok(out)
        });
        Ok(self.tape.custom(value, &[self, kernel], backward))
    }

    /// ReLU on real tensors, planar ReLU `σ(Re z) + jσ(Im z)` on complex ones.
    pub fn relu(self) -> Var<'t> {
        let v = self.value();
        let value = match &*v {
            Tensor::Real(r) => Tensor::Real(r.relu()),
            Tensor::Complex(c) => Tensor::Complex(ctensor::crelu(c)),
        };
        let id = self.id;
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            let gate = |x: &[f64], g: &[f64]| -> Vec<f64> {
                x.iter()
                    .zip(g)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect()
            };
            Ok(vec![(
                id,
                match (g, &*v) {
                    (Tensor::Real(g), Tensor::Real(x)) => {
                        real(x.shape().to_vec(), gate(x.data(), g.data()))
                    }
                    (Tensor::Complex(g), Tensor::Complex(x)) => cplx(
                        x.shape().to_vec(),
                        gate(x.re(), g.re()),
                        gate(x.im(), g.im()),
                    ),
                    _ => return Err(kind_mismatch("relu backward")),
                },
            )])
        });
        self.tape.custom(value, &[self], backward)
    }

    pub fn avg_pool2d(self, k: usize, stride: usize) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let geom = PoolGeom::new(&shape, k, stride)?;
        let value = match &*v {
            Tensor::Real(r) => Tensor::Real(ctensor::avg_pool2d_real(r, k, stride)?),
            Tensor::Complex(c) => Tensor::Complex(ctensor::avg_pool2d(c, k, stride)?),
        };
        let id = self.id;
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            Ok(vec![(
                id,
                match g {
                    Tensor::Real(g) => real(shape.clone(), avg_pool_backward(g.data(), &geom)),
                    Tensor::Complex(g) => cplx(
                        shape.clone(),
                        avg_pool_backward(g.re(), &geom),
                        avg_pool_backward(g.im(), &geom),
                    ),
                },
            )])
        });
        Ok(self.tape.custom(value, &[self], backward))
    }

    /// Centered 2d DFT over the trailing axes of a complex tensor.
    pub fn dft2d_centered(self, norm: DftNorm) -> Result<Var<'t>> {
        let v = self.value();
        let value = Tensor::Complex(ctensor::dft2d(v.as_complex()?, true, false, norm)?);
        let id = self.id;
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            Ok(vec![(
                id,
                Tensor::Complex(ctensor::dft2d(g.as_complex()?, true, true, norm)?),
            )])
        });
        Ok(self.tape.custom(value, &[self], backward))
    }

    /// `Re z` as a real tensor; the imaginary part receives a zero cotangent.
    pub fn real_part(self) -> Result<Var<'t>> {
        let v = self.value();
        let c = v.as_complex()?;
        let shape = c.shape().to_vec();
        let value = Tensor::Real(c.real_part());
        let id = self.id;
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            let g = g.as_real()?;
            Ok(vec![(
                id,
                cplx(shape.clone(), g.data().to_vec(), vec![0.0; g.len()]),
            )])
        });
        Ok(self.tape.custom(value, &[self], backward))
    }

    /// `|z|²` for complex, `x²` for real input; always real.
    pub fn abs2(self) -> Result<Var<'t>> {
        let v = self.value();
        let value = match &*v {
            Tensor::Real(r) => Tensor::Real(r.map(|x| x * x)),
            Tensor::Complex(c) => Tensor::Real(c.abs2()),
        };
        let id = self.id;
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            let g = g.as_real()?.data();
            Ok(vec![(
                id,
                match &*v {
                    Tensor::Real(x) => real(
                        x.shape().to_vec(),
                        x.data().iter().zip(g).map(|(x, g)| 2.0 * x * g).collect(),
                    ),
                    Tensor::Complex(z) => cplx(
                        z.shape().to_vec(),
                        z.re().iter().zip(g).map(|(x, g)| 2.0 * x * g).collect(),
                        z.im().iter().zip(g).map(|(x, g)| 2.0 * x * g).collect(),
                    ),
                },
            )])
        });
        Ok(self.tape.custom(value, &[self], backward))
    }

    /// Elementwise square (`z²`, holomorphic, for complex input).
    pub fn square(self) -> Var<'t> {
        let v = self.value();
        let value = match &*v {
            Tensor::Real(r) => Tensor::Real(r.map(|x| x * x)),
            Tensor::Complex(c) => Tensor::Complex(c.square()),
        };
        let id = self.id;
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            Ok(vec![(
                id,
                match (g, &*v) {
                    (Tensor::Real(g), Tensor::Real(x)) => real(
                        x.shape().to_vec(),
                        x.data()
                            .iter()
                            .zip(g.data())
                            .map(|(x, g)| 2.0 * x * g)
                            .collect(),
                    ),
                    (Tensor::Complex(g), Tensor::Complex(z)) => {
                        // conj(2z)·G
                        let (re, im) = (0..z.len())
                            .map(|i| {
                                let (a, b) = z.get(i);
                                let (gr, gi) = g.get(i);
                                (2.0 * (a * gr + b * gi), 2.0 * (a * gi - b * gr))
                            })
                            .unzip();
                        cplx(z.shape().to_vec(), re, im)
                    }
                    _ => return Err(kind_mismatch("square backward")),
                },
            )])
        });
        self.tape.custom(value, &[self], backward)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let v = self.value();
        let y = v.as_real()?.map(f64::exp);
        let yv = Arc::new(y.clone());
        let id = self.id;
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            let g = g.as_real()?;
            Ok(vec![(id, Tensor::Real(g.mul(&yv)?))])
        });
        Ok(self.tape.custom(Tensor::Real(y), &[self], backward))
    }

    /// Mean softmax cross-entropy of real logits `[B, K]` against class labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let logits = v.as_real()?;
        let s = logits.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                shape: s.to_vec(),
                reason: format!("expected [{}, classes]", labels.len()),
            });
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[label];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let labels = labels.to_vec();
        let id = self.id;
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            let scale = g.as_real()?.data()[0] / b as f64;
            let mut d = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                d[i * k + l] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= scale);
            Ok(vec![(id, real(vec![b, k], d))])
        });
        Ok(self
            .tape
            .custom(real(vec![1], vec![loss / b as f64]), &[self], backward))
    }

    /// Reparameterized draw `mean + sd·ε` given a real variance node.
    ///
    /// Real means use `sd = √var` and `noise_re`; complex means use
    /// `sd = √(var/2)` on both parts, with `noise_im` for the imaginary part.
    pub fn lrt_sample(
        self,
        var: Var<'t>,
        noise_re: Vec<f64>,
        noise_im: Option<Vec<f64>>,
    ) -> Result<Var<'t>> {
        self.same_tape(&var)?;
        let (mv, vv) = (self.value(), var.value());
        let variance = vv.as_real()?;
        if mv.shape() != variance.shape() || noise_re.len() != variance.len() {
            return Err(shape_mismatch("lrt_sample", mv.shape(), variance.shape()));
        }
        let complex = mv.is_complex();
        if complex && noise_im.as_ref().map(Vec::len) != Some(variance.len()) {
            return Err(Error::InvalidArgument(
                "complex lrt_sample needs imaginary noise".into(),
            ));
        }
        let half = if complex { 0.5 } else { 1.0 };
        if let Some(bad) = variance.data().iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "negative output variance {bad}"
            )));
        }
        let sd = exec::map_slice(variance.data(), move |v| (v * half).sqrt());
        let value = match &*mv {
            Tensor::Real(m) => real(
                m.shape().to_vec(),
                (0..m.len())
                    .map(|i| m.data()[i] + sd[i] * noise_re[i])
                    .collect(),
            ),
            Tensor::Complex(m) => {
                let ni = noise_im.as_ref().expect("checked above");
                cplx(
                    m.shape().to_vec(),
                    (0..m.len())
                        .map(|i| m.re()[i] + sd[i] * noise_re[i])
                        .collect(),
                    (0..m.len()).map(|i| m.im()[i] + sd[i] * ni[i]).collect(),
                )
            }
        };
        let (im_, iv, gm, gv) = (self.id, var.id, self.requires_grad(), var.requires_grad());
        let vshape = variance.shape().to_vec();
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            let mut out = Vec::new();
            if gm {
                out.push((im_, g.clone()));
            }
            if gv {
                // d sd / d var = half / (2 sd); zero where the variance vanishes.
                let d: Vec<f64> = match g {
                    Tensor::Real(g) => (0..g.len())
                        .map(|i| {
                            if sd[i] > 0.0 {
                                g.data()[i] * noise_re[i] * half / (2.0 * sd[i])
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                    Tensor::Complex(g) => {
                        let ni = noise_im.as_ref().expect("complex noise present");
                        (0..g.len())
                            .map(|i| {
                                if sd[i] > 0.0 {
                                    (g.re()[i] * noise_re[i] + g.im()[i] * ni[i]) * half
                                        / (2.0 * sd[i])
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    }
                };
                out.push((iv, real(vshape.clone(), d)));
            }
            Ok(out)
        });
        Ok(self.tape.custom(value, &[self, var], backward))
    }

    /// `ln(x + shift)` of a real tensor.
    pub fn ln_shift(self, shift: f64) -> Result<Var<'t>> {
        let v = self.value();
        let x = v.as_real()?;
        if let Some(bad) = x.data().iter().find(|&&a| !(a + shift > 0.0)) {
            return Err(Error::Domain {
                what: "ln_shift",
                value: *bad + shift,
                expected: "x + shift > 0",
            });
        }
        let value = Tensor::Real(x.map(move |a| (a + shift).ln()));
        let id = self.id;
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            let g = g.as_real()?;
            let x = v.as_real()?;
            let d = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, g)| g / (a + shift))
                .collect();
            Ok(vec![(id, real(x.shape().to_vec(), d))])
        });
        Ok(self.tape.custom(value, &[self], backward))
    }

    /// Adds `bias[c]` to every position of channel `c` in `[B, C, H, W]` or `[C, H, W]`.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias)?;
        let (xv, bv) = (self.value(), bias.value());
        let s = xv.shape().to_vec();
        let c = bv.len();
        if s.len() < 3 || s[s.len() - 3] != c || bv.shape().len() != 1 {
            return Err(shape_mismatch("add_channel_bias", &s, bv.shape()));
        }
        let plane = s[s.len() - 1] * s[s.len() - 2];
        let chan = move |i: usize| (i / plane) % c;
        let value = match (&*xv, &*bv) {
            (Tensor::Real(x), Tensor::Real(b)) => real(
                s.clone(),
                x.data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + b.data()[chan(i)])
                    .collect(),
            ),
            (Tensor::Complex(x), Tensor::Complex(b)) => cplx(
                s.clone(),
                x.re()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + b.re()[chan(i)])
                    .collect(),
                x.im()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + b.im()[chan(i)])
                    .collect(),
            ),
            _ => return Err(kind_mismatch("add_channel_bias")),
        };
        let (ix, ib, gx, gb) = (self.id, bias.id, self.requires_grad(), bias.requires_grad());
        let backward = Box::new(move |g: &Tensor| -> Result<Vec<(usize, Tensor)>> {
            let mut out = Vec::new();
            if gx {
                out.push((ix, g.clone()));
            }
            if gb {
                let mut parts = Vec::new();
                for comp in g.components() {
                    let mut acc = vec![0.0; c];
                    for (i, v) in comp.iter().enumerate() {
                        acc[chan(i)] += v;
                    }
                    parts.push(acc);
                }
                let t = match parts.len() {
                    1 => real(vec![c], parts.pop().expect("one part")),
                    _ => {
                        let im = parts.pop().expect("two parts");
                        cplx(vec![c], parts.pop().expect("two parts"), im)
                    }
                };
                out.push((ib, t));
            }
            Ok(out)
        });
        Ok(self.tape.custom(value, &[self, bias], backward))
    }
}
