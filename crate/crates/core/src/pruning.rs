//! Relevance thresholding, parameter accounting and compression rates.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::ParamStore;
use crate::dist::chi2_1_cdf;
use crate::error::{Error, Result};
use crate::varlayers::VarLayer;

/// Default relevance threshold on `log α`.
pub const DEFAULT_TAU: f64 = -0.5;

/// Retained positions of one layer's weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMask {
    pub name: String,
    pub keep: Vec<bool>,
    /// Complex weights store two floats per position.
    pub complex: bool,
}

impl LayerMask {
    fn width(&self) -> usize {
        if self.complex {
            2
        } else {
            1
        }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Masks for every variational layer plus float-value accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityMask {
    pub layers: Vec<LayerMask>,
    /// Total stored floats, including point estimates such as biases.
    pub n_par: usize,
    /// Floats removed by the masks.
    pub n_zer: usize,
    /// Floats that are never pruned.
    pub n_fixed: usize,
}

impl SparsityMask {
    /// `point_floats` counts parameters that are always retained (biases).
    pub fn new(layers: Vec<LayerMask>, point_floats: usize) -> Self {
        let weights: usize = layers.iter().map(|l| l.keep.len() * l.width()).sum();
        let n_zer = layers
            .iter()
            .map(|l| (l.keep.len() - l.kept()) * l.width())
            .sum();
        Self {
            layers,
            n_par: weights + point_floats,
            n_zer,
            n_fixed: point_floats,
        }
    }

    /// Largest attainable compression, reached when every weight is pruned.
    pub fn limit(&self) -> f64 {
        if self.n_fixed == 0 {
            f64::INFINITY
        } else {
            self.n_par as f64 / self.n_fixed as f64
        }
    }
}

/// `mask = log α ≤ τ` for every layer; ties are retained.
pub fn compute_masks(layers: &[&VarLayer], store: &ParamStore, tau: f64) -> Result<SparsityMask> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument(
            "model has no variational layers".into(),
        ));
    }
    let mut masks = Vec::with_capacity(layers.len());
    let mut point = 0;
    for layer in layers {
        let la = layer.log_alpha(store)?;
        masks.push(LayerMask {
            name: layer.name().to_string(),
            keep: la.data().iter().map(|&a| a <= tau).collect(),
            complex: layer.is_complex(),
        });
        point += layer.bias_floats(store);
    }
    Ok(SparsityMask::new(masks, point))
}

/// `n_par / (n_par - n_zer)`.
pub fn compression_rate(mask: &SparsityMask) -> Result<f64> {
    if mask.n_zer >= mask.n_par {
        return Err(Error::InfiniteCompression(mask.n_par));
    }
    Ok(mask.n_par as f64 / (mask.n_par - mask.n_zer) as f64)
}

/// Quantile of `χ²_k` for `k ∈ {1, 2}`.
pub fn chi2_quantile(k: u32, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain {
            what: "chi-square quantile probability",
            value: p,
            expected: "0 < p < 1",
        });
    }
    match k {
        2 => Ok(-2.0 * (-p).ln_1p()),
        1 => {
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            while chi2_1_cdf(hi) < p {
                hi *= 2.0;
            }
            while hi - lo > 1e-10 * hi.max(1e-300) {
                let mid = 0.5 * (lo + hi);
                if chi2_1_cdf(mid) < p {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok(0.5 * (lo + hi))
        }
        _ => Err(Error::InvalidArgument(format!(
            "chi-square quantile supports k = 1, 2; got {k}"
        ))),
    }
}

/// Largest `log α` for which `P(|w - μ| ≤ δ|μ|) ≥ prob`, where `k|w-μ|²/(α|μ|²) ~ χ²_k`
/// (`k = 2` for circular complex weights, `k = 1` for real ones).
pub fn threshold_for_tolerance(delta: f64, prob: f64, k: u32) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain {
            what: "relative tolerance delta",
            value: delta,
            expected: "0 < delta < 1",
        });
    }
    let q = chi2_quantile(k, prob)?;
    Ok((k as f64 * delta * delta / q).ln())
}

/// Monte-Carlo estimate and standard error of `P(|w - μ| ≤ δ|μ|)` for a
/// weight with `log α = la`, drawn circularly complex (`k = 2`) or real
/// (`k = 1`). Uses `μ = 1` without loss of generality.
pub fn threshold_coverage<R: Rng + ?Sized>(
    delta: f64,
    la: f64,
    k: u32,
    n: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if !(k == 1 || k == 2) || n < 2 {
        return Err(Error::InvalidArgument(format!(
            "coverage needs k in {{1, 2}} and n >= 2, got k = {k}, n = {n}"
        )));
    }
    let alpha = la.exp();
    let hits = (0..n)
        .filter(|_| {
            let d2 = match k {
                1 => alpha * rng.sample::<f64, _>(StandardNormal).powi(2),
                _ => {
                    let (a, b): (f64, f64) =
                        (rng.sample(StandardNormal), rng.sample(StandardNormal));
                    0.5 * alpha * (a * a + b * b)
                }
            };
            d2 <= delta * delta
        })
        .count();
    let p = hits as f64 / n as f64;
    Ok((p, (p * (1.0 - p) / n as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use crate::ctensor::RTensor;
    use crate::varlayers::{PenaltyKind, PenaltySpec};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer_with_log_alpha(store: &mut ParamStore, la: &[f64]) -> VarLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = VarLayer::linear(
            store,
            "l",
            la.len(),
            1,
            PenaltySpec::new(PenaltyKind::Rscale),
            &mut rng,
        );
        store
            .get_mut(layer.log_sigma2)
            .set_value(Tensor::Real(
                RTensor::new(vec![1, la.len()], la.to_vec()).unwrap(),
            ))
            .unwrap();
        layer
    }

    #[test]
    fn direct_comparison() {
        let mut store = ParamStore::new();
        let layer = layer_with_log_alpha(&mut store, &[-1.0, 0.0, -3.0, -0.5]);
        let m = compute_masks(&[&layer], &store, -0.5).unwrap();
        assert_eq!(m.layers[0].keep, vec![true, false, true, true]);
        assert!(compute_masks(&[], &store, -0.5).is_err());
    }

    #[test]
    fn infinite_thresholds() {
        let mut store = ParamStore::new();
        let layer = layer_with_log_alpha(&mut store, &[-1.0, 0.0, 4.0]);
        let all = compute_masks(&[&layer], &store, f64::INFINITY).unwrap();
        assert_eq!(compression_rate(&all).unwrap(), 1.0);
        let none = compute_masks(&[&layer], &store, f64::NEG_INFINITY).unwrap();
        // 3 complex weights + 1 complex bias.
        assert_eq!((none.n_par, none.n_zer), (8, 6));
        assert_eq!(compression_rate(&none).unwrap(), none.limit());
        assert_eq!(none.limit(), 4.0);
    }

    #[test]
    fn compression_examples() {
        let plain = |n_par, n_zer| SparsityMask {
            layers: vec![],
            n_par,
            n_zer,
            n_fixed: 0,
        };
        assert_eq!(compression_rate(&plain(100, 0)).unwrap(), 1.0);
        assert_eq!(compression_rate(&plain(100, 50)).unwrap(), 2.0);
        assert!(matches!(
            compression_rate(&plain(100, 100)),
            Err(Error::InfiniteCompression(100))
        ));

        let keep = (0..100).map(|i| i < 10).collect();
        let m = SparsityMask::new(
            vec![LayerMask {
                name: "w".into(),
                keep,
                complex: true,
            }],
            10,
        );
        assert_eq!((m.n_par, m.n_zer), (210, 180));
        assert!((compression_rate(&m).unwrap() - 7.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_values() {
        let b2 = threshold_for_tolerance(0.5, 0.9, 2).unwrap();
        assert!((b2 - (0.5f64 / (-2.0 * 0.1f64.ln())).ln()).abs() < 1e-12);
        let b1 = threshold_for_tolerance(0.5, 0.9, 1).unwrap();
        assert!((chi2_quantile(1, 0.9).unwrap() - 2.705_543_454_095_4).abs() < 1e-8);
        for b in [b1, b2] {
            assert!((b + 2.5).abs() < 0.3, "{b}");
        }
        assert!(threshold_for_tolerance(0.5, 1e-12, 2).unwrap() > 20.0);
        assert!(threshold_for_tolerance(1.5, 0.9, 2).is_err());
        assert!(threshold_for_tolerance(0.5, 0.9, 3).is_err());
    }

    #[test]
    fn coverage_at_threshold_matches_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in [1, 2] {
            let la = threshold_for_tolerance(0.5, 0.9, k).unwrap();
            let (p, se) = threshold_coverage(0.5, la, k, 200_000, &mut rng).unwrap();
            assert!((p - 0.9).abs() < 3.0 * se, "k = {k}: {p} ± {se}");
            // Stricter thresholds cover more.
            let (p2, _) = threshold_coverage(0.5, la - 1.0, k, 20_000, &mut rng).unwrap();
            assert!(p2 > 0.95);
        }
        assert!(threshold_coverage(0.5, 0.0, 3, 10, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn masks_are_monotone_in_tau(la in proptest::collection::vec(-10.0f64..10.0, 1..40), t1 in -10.0f64..10.0, dt in 0.0f64..5.0) {
            let mut store = ParamStore::new();
            let layer = layer_with_log_alpha(&mut store, &la);
            let a = compute_masks(&[&layer], &store, t1).unwrap();
            let b = compute_masks(&[&layer], &store, t1 + dt).unwrap();
            for (x, y) in a.layers[0].keep.iter().zip(&b.layers[0].keep) {
                prop_assert!(!x || *y);
            }
            prop_assert!(compression_rate(&a).unwrap() >= compression_rate(&b).unwrap());
            prop_assert_eq!(a.n_par, 2 * la.len() + 2);
        }
    }
}
