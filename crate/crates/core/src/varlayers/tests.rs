use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::gradcheck;
use crate::ctensor::cconv2d;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cinput(shape: Vec<usize>, seed: f64) -> CTensor {
    let n: usize = shape.iter().product();
    CTensor::new(
        shape,
        (0..n).map(|i| ((i as f64 + seed) * 0.77).sin()).collect(),
        (0..n).map(|i| ((i as f64 + seed) * 1.31).cos()).collect(),
    )
    .unwrap()
}

fn rinput(shape: Vec<usize>, seed: f64) -> RTensor {
    cinput(shape, seed).real_part()
}

fn input_for(layer: &VarLayer, shape: Vec<usize>) -> Tensor {
    if layer.is_complex() {
        cinput(shape, 0.5).into()
    } else {
        rinput(shape, 0.5).into()
    }
}

fn set_log_sigma2(store: &mut ParamStore, layer: &VarLayer, v: f64) {
    let shape = store.value(layer.log_sigma2).shape().to_vec();
    store
        .get_mut(layer.log_sigma2)
        .set_value(RTensor::full(shape, v).into())
        .unwrap();
}

fn eval(layer: &VarLayer, store: &ParamStore, x: &Tensor, seed: u64) -> Tensor {
    let tape = Tape::new();
    let y = layer
        .forward(&tape, store, tape.constant(x.clone()), &mut rng(seed))
        .unwrap();
    (*y.value()).clone()
}

#[test]
fn zero_variance_limit_is_deterministic() {
    for kind in PenaltyKind::ALL {
        let mut store = ParamStore::new();
        let mut layer =
            VarLayer::linear(&mut store, "l", 3, 2, PenaltySpec::new(kind), &mut rng(1));
        let x = input_for(&layer, vec![4, 3]);
        let det = eval(&layer, &store, &x, 0);
        set_log_sigma2(&mut store, &layer, -1000.0);
        layer.set_mode(Mode::Stochastic).unwrap();
        assert_eq!(eval(&layer, &store, &x, 9), det, "{kind}");
    }
}

#[test]
fn zero_input_gives_bias() {
    let mut store = ParamStore::new();
    let mut layer = VarLayer::linear(
        &mut store,
        "l",
        3,
        2,
        PenaltySpec::new(PenaltyKind::Cvd),
        &mut rng(1),
    );
    store
        .get_mut(layer.bias)
        .set_value(
            CTensor::new(vec![2], vec![0.5, -1.0], vec![2.0, 0.25])
                .unwrap()
                .into(),
        )
        .unwrap();
    layer.set_mode(Mode::Stochastic).unwrap();
    let y = eval(&layer, &store, &CTensor::zeros(vec![5, 3]).into(), 3);
    let y = y.as_complex().unwrap();
    for r in 0..5 {
        assert_eq!(y.get(2 * r), (0.5, 2.0));
        assert_eq!(y.get(2 * r + 1), (-1.0, 0.25));
    }
}

// Empirical mean, variance and relation of `samples` per output column.
struct Moments {
    mean: Vec<(f64, f64)>,
    var: Vec<f64>,
    rel: Vec<(f64, f64)>,
    se_mean: Vec<f64>,
    se_var: Vec<f64>,
    se_rel: Vec<(f64, f64)>,
}

fn moments(y: &CTensor, outputs: usize, center: &[(f64, f64)]) -> Moments {
    let rows = y.len() / outputs;
    let nf = rows as f64;
    let mut m = Moments {
        mean: vec![],
        var: vec![],
        rel: vec![],
        se_mean: vec![],
        se_var: vec![],
        se_rel: vec![],
    };
    for (o, &(cr, ci)) in center.iter().enumerate().take(outputs) {
        let d: Vec<(f64, f64)> = (0..rows)
            .map(|r| {
                let (a, b) = y.get(r * outputs + o);
                (a - cr, b - ci)
            })
            .collect();
        let mr = d.iter().map(|p| p.0).sum::<f64>() / nf;
        let mi = d.iter().map(|p| p.1).sum::<f64>() / nf;
        let v: Vec<f64> = d.iter().map(|p| p.0 * p.0 + p.1 * p.1).collect();
        let rr: Vec<f64> = d.iter().map(|p| p.0 * p.0 - p.1 * p.1).collect();
        let ri: Vec<f64> = d.iter().map(|p| 2.0 * p.0 * p.1).collect();
        let stat = |xs: &[f64]| {
            let mu = xs.iter().sum::<f64>() / nf;
            let sd = (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
            (mu, sd / nf.sqrt())
        };
        let (vm, vse) = stat(&v);
        let (rrm, rrse) = stat(&rr);
        let (rim, rise) = stat(&ri);
        m.mean.push((mr + cr, mi + ci));
        m.se_mean.push((vm / nf).sqrt());
        m.var.push(vm);
        m.se_var.push(vse);
        m.rel.push((rrm, rim));
        m.se_rel.push((rrse, rise));
    }
    m
}

// Analytic moments: mean b + μx, variance Σ σ²|x|² (circular) or the relation-carrying pair.
fn analytic(
    store: &ParamStore,
    layer: &VarLayer,
    x: &CTensor,
) -> (Vec<(f64, f64)>, Vec<f64>, Vec<(f64, f64)>) {
    let mu = store.value(layer.mu).as_complex().unwrap();
    let b = store.value(layer.bias).as_complex().unwrap();
    let ls = store.value(layer.log_sigma2).as_real().unwrap();
    let (n, m) = (mu.shape()[0], mu.shape()[1]);
    let mut mean = vec![];
    let mut var = vec![];
    let mut rel = vec![];
    for i in 0..n {
        let (mut ar, mut ai) = b.get(i);
        let (mut v, mut rr, mut ri) = (0.0, 0.0, 0.0);
        for j in 0..m {
            let (wr, wi) = mu.get(i * m + j);
            let (xr, xi) = x.get(j);
            let (pr, pi) = (wr * xr - wi * xi, wr * xi + wi * xr);
            ar += pr;
            ai += pi;
            let s = ls.data()[i * m + j].exp();
            if layer.penalty.kind == PenaltyKind::Rscale {
                v += s * (pr * pr + pi * pi);
                rr += s * (pr * pr - pi * pi);
                ri += s * 2.0 * pr * pi;
            } else {
                v += s * (xr * xr + xi * xi);
            }
        }
        mean.push((ar, ai));
        var.push(v);
        rel.push((rr, ri));
    }
    (mean, var, rel)
}

fn check_lrt_moments(kind: PenaltyKind, n_in: usize, n_out: usize) {
    let mut store = ParamStore::new();
    let mut layer = VarLayer::linear(
        &mut store,
        "l",
        n_in,
        n_out,
        PenaltySpec::new(kind),
        &mut rng(4),
    );
    let ls: Vec<f64> = (0..n_in * n_out).map(|i| -1.5 + 0.3 * i as f64).collect();
    store
        .get_mut(layer.log_sigma2)
        .set_value(RTensor::new(vec![n_out, n_in], ls).unwrap().into())
        .unwrap();
    layer.set_mode(Mode::Stochastic).unwrap();
    let x1 = cinput(vec![n_in], 2.0);
    let rows = 100_000;
    let xs = CTensor::new(
        vec![rows, n_in],
        x1.re().iter().cycle().take(rows * n_in).cloned().collect(),
        x1.im().iter().cycle().take(rows * n_in).cloned().collect(),
    )
    .unwrap();
    let y = eval(&layer, &store, &xs.into(), 77);
    let (mean, var, rel) = analytic(&store, &layer, &x1);
    let mo = moments(y.as_complex().unwrap(), n_out, &mean);
    for o in 0..n_out {
        let z = |a: f64, b: f64, se: f64| (a - b).abs() / se;
        assert!(
            z(mo.mean[o].0, mean[o].0, mo.se_mean[o]) < 3.0,
            "{kind} mean re {o}"
        );
        assert!(
            z(mo.mean[o].1, mean[o].1, mo.se_mean[o]) < 3.0,
            "{kind} mean im {o}"
        );
        assert!(
            z(mo.var[o], var[o], mo.se_var[o]) < 3.0,
            "{kind} var {o}: {} vs {}",
            mo.var[o],
            var[o]
        );
        assert!(
            z(mo.rel[o].0, rel[o].0, mo.se_rel[o].0) < 3.0,
            "{kind} rel re {o}"
        );
        assert!(
            z(mo.rel[o].1, rel[o].1, mo.se_rel[o].1) < 3.0,
            "{kind} rel im {o}"
        );
    }
}

#[test]
fn lrt_moments_match_analytic() {
    check_lrt_moments(PenaltyKind::Cvd, 3, 2);
}

#[test]
fn rscale_moments_carry_relation() {
    check_lrt_moments(PenaltyKind::Rscale, 3, 2);
}

#[test]
fn rscale_single_real_weight_has_relation_equal_to_variance() {
    let mut store = ParamStore::new();
    let mut layer = VarLayer::linear(
        &mut store,
        "l",
        1,
        1,
        PenaltySpec::new(PenaltyKind::Rscale),
        &mut rng(4),
    );
    store
        .get_mut(layer.mu)
        .set_value(
            CTensor::new(vec![1, 1], vec![1.5], vec![0.0])
                .unwrap()
                .into(),
        )
        .unwrap();
    set_log_sigma2(&mut store, &layer, 0.0);
    layer.set_mode(Mode::Stochastic).unwrap();
    let x = CTensor::new(vec![64, 1], vec![0.8; 64], vec![0.0; 64]).unwrap();
    let y = eval(&layer, &store, &x.into(), 5);
    // Noise purely along μ x, which is real: the imaginary part never moves.
    assert!(y.as_complex().unwrap().im().iter().all(|v| *v == 0.0));
}

#[test]
fn conv_lrt_zero_variance_and_one_by_one() {
    let mut store = ParamStore::new();
    let mut conv = VarLayer::conv2d(
        &mut store,
        "c",
        2,
        3,
        1,
        1,
        PenaltySpec::new(PenaltyKind::Card),
        &mut rng(8),
    );
    let x = cinput(vec![2, 2, 3, 3], 1.0);
    let det = eval(&conv, &store, &x.clone().into(), 0);
    let kernel = store.value(conv.mu).as_complex().unwrap().clone();
    assert_eq!(det.as_complex().unwrap(), &cconv2d(&kernel, &x, 1).unwrap());

    // 1×1 conv equals the dense layer applied per pixel.
    let w = kernel.clone().reshape(vec![3, 2]).unwrap();
    let mut lin_store = ParamStore::new();
    let lin = VarLayer::linear(
        &mut lin_store,
        "l",
        2,
        3,
        PenaltySpec::new(PenaltyKind::Card),
        &mut rng(8),
    );
    lin_store.get_mut(lin.mu).set_value(w.into()).unwrap();
    let mut pix_re = vec![];
    let mut pix_im = vec![];
    for b in 0..2 {
        for p in 0..9 {
            for c in 0..2 {
                let (r, i) = x.get(b * 18 + c * 9 + p);
                pix_re.push(r);
                pix_im.push(i);
            }
        }
    }
    let px = CTensor::new(vec![18, 2], pix_re, pix_im).unwrap();
    let dense = eval(&lin, &lin_store, &px.into(), 0);
    let dense = dense.as_complex().unwrap();
    let det = det.as_complex().unwrap();
    for b in 0..2 {
        for p in 0..9 {
            for o in 0..3 {
                let (a, bb) = det.get(b * 27 + o * 9 + p);
                let (c, d) = dense.get((b * 9 + p) * 3 + o);
                assert!((a - c).abs() < 1e-12 && (bb - d).abs() < 1e-12);
            }
        }
    }

    set_log_sigma2(&mut store, &conv, -1000.0);
    conv.set_mode(Mode::Stochastic).unwrap();
    assert_eq!(
        eval(&conv, &store, &x.clone().into(), 1)
            .as_complex()
            .unwrap(),
        det
    );
}

#[test]
fn conv_lrt_variance_map() {
    let mut store = ParamStore::new();
    let mut conv = VarLayer::conv2d(
        &mut store,
        "c",
        1,
        2,
        2,
        1,
        PenaltySpec::new(PenaltyKind::Cvd),
        &mut rng(8),
    );
    set_log_sigma2(&mut store, &conv, -1.0);
    conv.set_mode(Mode::Stochastic).unwrap();
    let x1 = cinput(vec![1, 3, 3], 0.0);
    let reps = 40_000;
    let xs = CTensor::new(
        vec![reps, 1, 3, 3],
        x1.re().iter().cycle().take(reps * 9).cloned().collect(),
        x1.im().iter().cycle().take(reps * 9).cloned().collect(),
    )
    .unwrap();
    let y = eval(&conv, &store, &xs.into(), 3);
    conv.set_mode(Mode::Deterministic).unwrap();
    let mean = eval(&conv, &store, &x1.clone().into(), 0);
    let mean = mean.as_complex().unwrap();
    let center: Vec<(f64, f64)> = (0..8).map(|i| mean.get(i)).collect();
    let mo = moments(y.as_complex().unwrap(), 8, &center);
    let s2 = (-1f64).exp();
    for o in 0..2 {
        for p in 0..4 {
            let (py, px) = (p / 2, p % 2);
            let mut v = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    let (a, b) = x1.get((py + dy) * 3 + px + dx);
                    v += s2 * (a * a + b * b);
                }
            }
            let k = o * 4 + p;
            assert!(
                (mo.var[k] - v).abs() < 3.0 * mo.se_var[k],
                "{k}: {} vs {v}",
                mo.var[k]
            );
            assert!((mo.mean[k].0 - center[k].0).abs() < 3.0 * mo.se_mean[k]);
        }
    }
}

#[test]
fn log_alpha_examples() {
    let mut store = ParamStore::new();
    let layer = VarLayer::linear(
        &mut store,
        "l",
        4,
        3,
        PenaltySpec::new(PenaltyKind::Cvd),
        &mut rng(2),
    );
    // Fresh layers start at log α = -8.
    let la = layer.log_alpha(&store).unwrap();
    assert!(la.data().iter().all(|v| (v + 8.0).abs() < 1e-6));

    let mu = store.value(layer.mu).as_complex().unwrap().clone();
    let ls = mu.abs2().map(f64::ln);
    store
        .get_mut(layer.log_sigma2)
        .set_value(ls.clone().into())
        .unwrap();
    assert!(layer
        .log_alpha(&store)
        .unwrap()
        .data()
        .iter()
        .all(|v| v.abs() < 1e-9));

    let ls2 = ls.map(|v| v + 0.37);
    store
        .get_mut(layer.log_sigma2)
        .set_value(ls2.clone().into())
        .unwrap();
    let la = layer.log_alpha(&store).unwrap();
    for i in 0..la.len() {
        let back = la.data()[i].exp() * mu.abs2().data()[i];
        assert!((back - ls2.data()[i].exp()).abs() < 1e-6 * ls2.data()[i].exp());
    }

    store
        .get_mut(layer.mu)
        .set_value(CTensor::zeros(vec![3, 4]).into())
        .unwrap();
    store
        .get_mut(layer.log_sigma2)
        .set_value(RTensor::full(vec![3, 4], -2.0).into())
        .unwrap();
    let la = layer.log_alpha(&store).unwrap();
    assert!(la.data().iter().all(|v| (v - (-2.0 + 27.631)).abs() < 1e-2));
}

#[test]
fn masks() {
    let mut store = ParamStore::new();
    let mut layer = VarLayer::linear(
        &mut store,
        "l",
        4,
        3,
        PenaltySpec::new(PenaltyKind::Card),
        &mut rng(2),
    );
    store
        .get_mut(layer.bias)
        .set_value(cinput(vec![3], 9.0).into())
        .unwrap();
    let x: Tensor = cinput(vec![2, 4], 3.0).into();
    let dense = eval(&layer, &store, &x, 0);
    assert!(layer.set_mode(Mode::Masked).is_err());
    assert!(layer.apply_mask(&mut store, &[true; 5]).is_err());

    let mut ones = layer.clone();
    let mut s1 = store.clone();
    ones.apply_mask(&mut s1, &[true; 12]).unwrap();
    assert_eq!(eval(&ones, &s1, &x, 0), dense);

    let mut none = layer.clone();
    let mut s0 = store.clone();
    none.apply_mask(&mut s0, &[false; 12]).unwrap();
    let y = eval(&none, &s0, &x, 0);
    let b = store.value(layer.bias).as_complex().unwrap();
    let y = y.as_complex().unwrap();
    for i in 0..6 {
        assert_eq!(y.get(i), b.get(i % 3));
    }

    let keep: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
    layer.apply_mask(&mut store, &keep).unwrap();
    let masked = eval(&layer, &store, &x, 0);
    layer.set_mode(Mode::Deterministic).unwrap();
    assert_eq!(eval(&layer, &store, &x, 0), masked);
    let mu = store.value(layer.mu).as_complex().unwrap();
    assert!((0..12).all(|i| keep[i] || mu.get(i) == (0.0, 0.0)));
}

#[test]
fn every_layer_and_penalty_passes_gradcheck() {
    for kind in PenaltyKind::ALL {
        for conv in [false, true] {
            let mut store = ParamStore::new();
            let mut layer = if conv {
                VarLayer::conv2d(
                    &mut store,
                    "c",
                    2,
                    2,
                    2,
                    1,
                    PenaltySpec::new(kind),
                    &mut rng(5),
                )
            } else {
                VarLayer::linear(&mut store, "l", 3, 2, PenaltySpec::new(kind), &mut rng(5))
            };
            layer.reset_log_alpha(&mut store, -1.0).unwrap();
            store.get_mut(layer.bias).value_mut().components_mut()[0][0] = 0.3;
            layer.set_mode(Mode::Stochastic).unwrap();
            let x = input_for(&layer, if conv { vec![2, 2, 3, 3] } else { vec![4, 3] });
            let rep = gradcheck(
                &mut store,
                |t, s| {
                    let y = layer.forward(t, s, t.constant(x.clone()), &mut rng(11))?;
                    let y = if layer.is_complex() {
                        y.abs2()?
                    } else {
                        y.square()
                    };
                    y.sum().add(layer.penalty_var(t, s)?.scale(0.1))
                },
                1e-6,
                1e-5,
            )
            .unwrap();
            assert!(rep.passed(), "{kind} conv={conv}: {rep:?}");
        }
    }
}

#[test]
fn log_alpha_gradient_split_is_antisymmetric() {
    // K depends on μ and σ² only through log σ² - log|μ|².
    let mut store = ParamStore::new();
    let layer = VarLayer::linear(
        &mut store,
        "l",
        2,
        1,
        PenaltySpec::new(PenaltyKind::Cvd),
        &mut rng(3),
    );
    layer.reset_log_alpha(&mut store, 0.4).unwrap();
    let tape = Tape::new();
    let g = layer
        .penalty_var(&tape, &store)
        .unwrap()
        .backward()
        .unwrap();
    let gs = g.get(layer.log_sigma2).unwrap().as_real().unwrap();
    let gm = g.get(layer.mu).unwrap().as_complex().unwrap();
    let mu = store.value(layer.mu).as_complex().unwrap();
    for i in 0..2 {
        // dK/dlog|μ|² = (μ·grad_μ)/2|μ|² after undoing the chain rule on |μ|².
        let (a, b) = mu.get(i);
        let (ga, gb) = gm.get(i);
        let d_log_abs2 = (a * ga + b * gb) / 2.0;
        assert!(
            (d_log_abs2 + gs.data()[i]).abs() < 1e-9 * gs.data()[i].abs(),
            "{d_log_abs2} {}",
            gs.data()[i]
        );
    }
}
