use cvsparse::ctensor::{cmatmul, conj, dft2d, CTensor, DftNorm};
use proptest::prelude::*;

fn ctensor(shape: Vec<usize>) -> impl Strategy<Value = CTensor> {
    let n: usize = shape.iter().product();
    (
        proptest::collection::vec(-3.0f64..3.0, n),
        proptest::collection::vec(-3.0f64..3.0, n),
    )
        .prop_map(move |(re, im)| CTensor::new(shape.clone(), re, im).unwrap())
}

fn matmul_case() -> impl Strategy<Value = (CTensor, CTensor)> {
    (1usize..6, 1usize..6, 1usize..5)
        .prop_flat_map(|(n, m, b)| (ctensor(vec![n, m]), ctensor(vec![b, m])))
}

/// `[Re y; Im y] = [[A, -B], [B, A]] [Re x; Im x]` with `W = A + jB`, by plain loops.
fn block_form(w: &CTensor, x: &CTensor) -> (Vec<f64>, Vec<f64>) {
    let (n, m) = (w.shape()[0], w.shape()[1]);
    let b = x.len() / m;
    let mut block = vec![0.0; 4 * n * m];
    for i in 0..n {
        for k in 0..m {
            let (a, bb) = w.get(i * m + k);
            block[i * 2 * m + k] = a;
            block[i * 2 * m + m + k] = -bb;
            block[(n + i) * 2 * m + k] = bb;
            block[(n + i) * 2 * m + m + k] = a;
        }
    }
    let (mut re, mut im) = (vec![0.0; b * n], vec![0.0; b * n]);
    for s in 0..b {
        let v: Vec<f64> = x.re()[s * m..(s + 1) * m]
            .iter()
            .chain(&x.im()[s * m..(s + 1) * m])
            .copied()
            .collect();
        for r in 0..2 * n {
            let y: f64 = (0..2 * m).map(|c| block[r * 2 * m + c] * v[c]).sum();
            if r < n {
                re[s * n + r] = y;
            } else {
                im[s * n + r - n] = y;
            }
        }
    }
    (re, im)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1e-300f64, |s, v| s.max(v.abs()));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

fn close(a: &CTensor, b: &CTensor, tol: f64) -> bool {
    a.shape() == b.shape() && max_rel(a.re(), b.re()) < tol && max_rel(a.im(), b.im()) < tol
}

proptest! {
    #[test]
    fn cmatmul_equals_real_block_form((w, x) in matmul_case()) {
        let y = cmatmul(&w, &x).unwrap();
        let (re, im) = block_form(&w, &x);
        let all: Vec<f64> = re.iter().chain(&im).copied().collect();
        let got: Vec<f64> = y.re().iter().chain(y.im()).copied().collect();
        prop_assert!(max_rel(&got, &all) < 1e-12);
    }

    #[test]
    fn cmatmul_is_complex_linear(
        (w, x) in matmul_case(),
        a in (-2.0f64..2.0, -2.0f64..2.0),
        b in (-2.0f64..2.0, -2.0f64..2.0),
        seed in 0u64..1000,
    ) {
        let x2 = CTensor::new(
            x.shape().to_vec(),
            x.im().iter().map(|v| (v + seed as f64).sin()).collect(),
            x.re().iter().map(|v| (v * 1.7).cos()).collect(),
        ).unwrap();
        let lhs = cmatmul(&w, &x.scale(a.0, a.1).add(&x2.scale(b.0, b.1)).unwrap()).unwrap();
        let rhs = cmatmul(&w, &x).unwrap().scale(a.0, a.1).add(&cmatmul(&w, &x2).unwrap().scale(b.0, b.1)).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-12));
    }

    #[test]
    fn conjugation_is_involutive_and_multiplicative(x in ctensor(vec![7]), y in ctensor(vec![7])) {
        prop_assert_eq!(conj(&conj(&x)), x.clone());
        let lhs = conj(&x.mul(&y).unwrap());
        let rhs = conj(&x).mul(&conj(&y)).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-15));
        // |x|² = x x̄.
        let n = x.mul(&conj(&x)).unwrap();
        prop_assert!(n.im().iter().all(|v| v.abs() < 1e-12));
        prop_assert!(max_rel(n.re(), x.abs2().data()) < 1e-14);
    }

    #[test]
    fn orthonormal_dft_preserves_energy(
        x in (1usize..7, 1usize..7).prop_flat_map(|(h, w)| ctensor(vec![2, h, w])),
        centered in any::<bool>(),
    ) {
        let y = dft2d(&x, centered, false, DftNorm::Ortho).unwrap();
        let e = |t: &CTensor| t.abs2().sum();
        prop_assert!((e(&y) - e(&x)).abs() <= 1e-12 * e(&x).max(1.0));
        let back = dft2d(&y, centered, true, DftNorm::Ortho).unwrap();
        prop_assert!(close(&back, &x, 1e-12));
    }

    #[test]
    fn dft_adjoint_matches_inner_product(
        (x, y) in (1usize..6, 1usize..6).prop_flat_map(|(h, w)| (ctensor(vec![h, w]), ctensor(vec![h, w]))),
    ) {
        // <F x, y> = <x, F* y> with <a, b> = Σ a b̄.
        let inner = |a: &CTensor, b: &CTensor| {
            let p = a.mul(&conj(b)).unwrap();
            (p.re().iter().sum::<f64>(), p.im().iter().sum::<f64>())
        };
        let fx = dft2d(&x, true, false, DftNorm::None).unwrap();
        let fy = dft2d(&y, true, true, DftNorm::None).unwrap();
        let (l, r) = (inner(&fx, &y), inner(&x, &fy));
        prop_assert!((l.0 - r.0).abs() < 1e-9 && (l.1 - r.1).abs() < 1e-9);
    }
}

#[test]
fn hundred_block_form_instances() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (n, m, b) = (
            rng.random_range(1..9),
            rng.random_range(1..9),
            rng.random_range(1..4),
        );
        let mut draw = |k: usize| {
            (0..k)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        let w = CTensor::new(vec![n, m], draw(n * m), draw(n * m)).unwrap();
        let x = CTensor::new(vec![b, m], draw(b * m), draw(b * m)).unwrap();
        let y = cmatmul(&w, &x).unwrap();
        let (re, im) = block_form(&w, &x);
        assert!(max_rel(y.re(), &re) < 1e-12 && max_rel(y.im(), &im) < 1e-12);
    }
}
