use hgad_core::dataio::{clean, make_windows, minmax_apply, minmax_fit, TimeSeriesDataset};
use hgad_core::detectors::{
    gmm_fit_k, pca_fit, pca_score, threshold_select, DetectorConfig, DetectorKind, ErrorMatrix, FittedDetector,
    ThresholdPolicy,
};
use hgad_core::eval::{confusion, metrics};
use hgad_core::graphconv::{hypergraph_conv, topk_select};
use hgad_core::hypergraph::{HypergraphConfig, MtclParams};
use hgad_core::masking::{sample_mask, temporal_weights, MaskStage};
use hgad_core::numerics::{grad_check, grad_check_many, sigmoid, softmax_temperature, Activation, Graph, Tensor};
use hgad_core::params::ParamSet;
use hgad_core::tcn::{gated_fusion, tcn_forward, TcnConfig, TcnParams};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dataset(rows: usize, n: usize, seed: u64) -> TimeSeriesDataset {
    let mut r = rng(seed);
    let values = (0..rows * n).map(|_| r.gen_range(-5.0..5.0)).collect();
    TimeSeriesDataset::new(values, (0..n).map(|i| format!("f{i}")).collect(), None, None).unwrap()
}

fn errors(rows: usize, n: usize, seed: u64) -> ErrorMatrix {
    let mut r = rng(seed);
    ErrorMatrix::new(n, (0..rows * n).map(|_| r.gen_range(-2.0..2.0)).collect(), (0..rows).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn primitive_ops_pass_grad_check(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::uniform(&[3, 4], 2.0, &mut r);
        let b = Tensor::uniform(&[4, 2], 2.0, &mut r);
        let c = Tensor::uniform(&[3, 4], 2.0, &mut r);
        let err = grad_check_many(
            |g, v| {
                let m = g.matmul(v[0], v[1])?;
                let t = g.tanh(m)?;
                let s = g.sigmoid(v[2])?;
                let p = g.mul(v[0], s)?;
                let q = g.sum_axis(p, 1)?;
                let q = g.powf(q, 2.0)?;
                let x = g.sum(t)?;
                let y = g.sum(q)?;
                g.add(x, y)
            },
            &[a, b, c],
            1e-5,
        )
        .unwrap();
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fan_out_gradients_accumulate(seed in any::<u64>()) {
        let x = Tensor::uniform(&[2, 3], 2.0, &mut rng(seed));
        let err = grad_check(
            |g, x| {
                let a = g.tanh(x)?;
                let b = g.mul(x, a)?;
                let c = g.scale(x, 3.0)?;
                let d = g.add(b, c)?;
                g.sum(d)
            },
            &x,
            1e-5,
        )
        .unwrap();
        prop_assert!(err < 1e-4);
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..12), tau in 0.05f64..10.0) {
        let p = softmax_temperature(&v, tau).unwrap();
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn activations_stay_in_range(x in -1e6f64..1e6) {
        let t = Activation::Tanh.apply(x);
        prop_assert!((-1.0..=1.0).contains(&t));
        prop_assert!((0.0..=1.0).contains(&sigmoid(x)));
        prop_assert!(Activation::Relu.apply(x) >= 0.0);
    }

    #[test]
    fn minmax_maps_train_into_unit_range(rows in 2usize..40, n in 1usize..5, seed in any::<u64>()) {
        let ds = dataset(rows, n, seed);
        let state = minmax_fit(&ds);
        let y = minmax_apply(&ds, &state).unwrap();
        prop_assert!(y.values().iter().all(|v| (0.0..=1.0).contains(v)));
        let back = state.inverse(&y).unwrap();
        for (a, b) in back.values().iter().zip(ds.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clean_is_idempotent(rows in 1usize..30, n in 1usize..4, seed in any::<u64>(), holes in 0.0f64..0.5) {
        let mut r = rng(seed);
        let values: Vec<f64> = (0..rows * n)
            .map(|_| if r.gen_bool(holes) { f64::NAN } else { r.gen_range(-1.0..1.0) })
            .collect();
        let ds = TimeSeriesDataset::new(values, (0..n).map(|i| format!("f{i}")).collect(), None, None).unwrap();
        let once = clean(&ds);
        let twice = clean(&once);
        let bits = |d: &TimeSeriesDataset| d.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&once), bits(&twice));
    }

    #[test]
    fn window_count_and_last_column(t in 2usize..40, k in 1usize..10, h in 1usize..4, n in 1usize..4) {
        prop_assume!(h < t);
        let ds = dataset(t, n, t as u64);
        let w = make_windows(&ds, k, h).unwrap();
        prop_assert_eq!(w.len(), t - h);
        let all: Vec<usize> = (0..w.len()).collect();
        let b = w.batch(&all);
        for (i, &end) in b.end_indices.iter().enumerate() {
            for f in 0..n {
                let last = b.inputs[(i * n + f) * k + k - 1];
                prop_assert_eq!(last, ds.value(end, f));
                prop_assert_eq!(b.targets[i * n + f], ds.value(end + h, f));
            }
        }
    }

    #[test]
    fn structures_are_nonnegative_and_deterministic(n in 2usize..9, seed in any::<u64>()) {
        let cfg = HypergraphConfig { embed_dim: 5, ..Default::default() };
        let a = MtclParams::init(n, &cfg, &mut rng(seed)).unwrap().structure(Default::default()).unwrap();
        let b = MtclParams::init(n, &cfg, &mut rng(seed)).unwrap().structure(Default::default()).unwrap();
        prop_assert!(a.h.data().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn tcn_is_causal(seed in any::<u64>(), layers in 1usize..3, extra in 1usize..5) {
        let cfg = TcnConfig {
            layers,
            kernel_sizes: vec![2, 3],
            conv_channels: 4,
            residual_channels: 2,
            skip_channels: 2,
            ..Default::default()
        };
        let mut r = rng(seed);
        let p = TcnParams::init(&cfg, &mut r).unwrap();
        let t = cfg.required_window() + extra;
        let x = Tensor::uniform(&[1, 2, 1, t], 1.0, &mut r);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let l = p.register(&mut g, false);
            let (_, skip) = tcn_forward(&mut g, xv, &cfg, &l).unwrap();
            g.value(skip).clone()
        };
        let y0 = run(&x);
        let cut = r.gen_range(1..t);
        let mut x2 = x.clone();
        // perturb only steps at or after `cut`
        for c in 0..2 {
            for s in cut..t {
                x2.data_mut()[c * t + s] += 1.0;
            }
        }
        let y1 = run(&x2);
        let out_len = y0.shape()[3];
        let first_out = t - out_len;
        for c in 0..2 {
            for o in 0..out_len {
                if first_out + o < cut {
                    prop_assert_eq!(y0.data()[c * out_len + o], y1.data()[c * out_len + o]);
                }
            }
        }
    }

    #[test]
    fn gated_values_are_bounded(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let f = g.constant(Tensor::uniform(&[4, 5], 30.0, &mut r));
        let s = g.constant(Tensor::uniform(&[4, 5], 30.0, &mut r));
        let y = gated_fusion(&mut g, f, s).unwrap();
        prop_assert!(g.value(y).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn theta_is_a_spectral_contraction(n in 2usize..8, f in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let s = MtclParams::init(n, &HypergraphConfig::default(), &mut r).unwrap().structure(Default::default()).unwrap();
        let x = Tensor::uniform(&[1, n, f], 1.0, &mut r);
        // ReLU removed by feeding [X, -X] through identity weights
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let tv = g.constant(s.theta.clone());
        let wv = g.constant(Tensor::eye(f));
        let pos = hypergraph_conv(&mut g, xv, tv, wv).unwrap();
        let neg_x = g.scale(xv, -1.0).unwrap();
        let neg = hypergraph_conv(&mut g, neg_x, tv, wv).unwrap();
        let y = g.sub(pos, neg).unwrap();
        let ym = DMatrix::from_row_slice(n, f, g.value(y).data());
        let xm = DMatrix::from_row_slice(n, f, x.data());
        let norm = |m: &DMatrix<f64>| m.clone().singular_values().max();
        prop_assert!(norm(&ym) <= norm(&xm) + 1e-12);
    }

    #[test]
    fn topk_count_and_scale_invariance(n in 2usize..9, k in 1usize..9, scale in 0.01f64..100.0, seed in any::<u64>()) {
        prop_assume!(k < n);
        let mut r = rng(seed);
        let e = DMatrix::from_fn(n, 3, |_, _| r.gen_range(-1.0..1.0));
        let cos = |e: &DMatrix<f64>| {
            let mut c = Tensor::zeros(&[n, n]);
            for i in 0..n {
                for j in 0..n {
                    c.data_mut()[i * n + j] = e.row(i).dot(&e.row(j)) / (e.row(i).norm() * e.row(j).norm());
                }
            }
            c
        };
        let a = topk_select(&cos(&e), k).unwrap();
        let b = topk_select(&cos(&(e * scale)), k).unwrap();
        prop_assert!(a.iter().all(|row| row.len() == k.min(n - 1)));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn temporal_weights_normalized_and_monotone(alpha in 0.01f64..1.0, steps in 1usize..100) {
        let w = temporal_weights(alpha, steps).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn masks_are_reproducible(seed in any::<u64>(), lap in any::<bool>()) {
        let stage = if lap { MaskStage::Laplacian } else { MaskStage::Random };
        let probs = [0.1, 0.2, 0.3, 0.4];
        let w = temporal_weights(0.9, 6).unwrap();
        let a = sample_mask(&probs, &w, 0.2, stage, 5, seed).unwrap();
        let b = sample_mask(&probs, &w, 0.2, stage, 5, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pca_basis_is_orthonormal_and_scores_nonnegative(n in 2usize..7, target in 0.3f64..1.0, seed in any::<u64>()) {
        let val = errors(80, n, seed);
        let det = pca_fit(&val, target).unwrap();
        let p = det.components;
        let b = DMatrix::from_row_slice(n, p, &det.basis);
        prop_assert!((b.transpose() * &b - DMatrix::identity(p, p)).amax() < 1e-8);
        let s = pca_score(&errors(20, n, seed ^ 1), &det).unwrap();
        prop_assert!(s.iter().all(|&v| v >= 0.0));
        // a combination of basis vectors lies in the subspace
        let mut r = rng(seed);
        let coef = nalgebra::DVector::from_fn(p, |_, _| r.gen_range(-3.0..3.0));
        let inside = &b * coef;
        let e = ErrorMatrix::new(n, inside.as_slice().to_vec(), vec![0]).unwrap();
        prop_assert!(pca_score(&e, &det).unwrap()[0] < 1e-10);
    }

    #[test]
    fn em_log_likelihood_never_decreases(k in 1usize..4, seed in any::<u64>()) {
        let det = gmm_fit_k(&errors(120, 3, seed), k, seed).unwrap();
        prop_assert!(det.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn max_threshold_has_no_validation_flags(seed in any::<u64>(), pca in any::<bool>()) {
        let val = errors(100, 4, seed);
        let cfg = DetectorConfig {
            kind: if pca { DetectorKind::Pca } else { DetectorKind::Gmm },
            threshold: ThresholdPolicy::Max,
            seed,
            ..Default::default()
        };
        let det = FittedDetector::fit(&val, &cfg, None).unwrap();
        prop_assert_eq!(det.detect(&val).unwrap().n_flagged(), 0);
    }

    #[test]
    fn quantile_threshold_is_monotone(v in prop::collection::vec(-10.0f64..10.0, 1..50), q1 in 0.0f64..1.0, q2 in 0.0f64..1.0) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let a = threshold_select(&v, ThresholdPolicy::Quantile { q: lo }).unwrap();
        let b = threshold_select(&v, ThresholdPolicy::Quantile { q: hi }).unwrap();
        prop_assert!(a <= b);
        prop_assert!(b <= threshold_select(&v, ThresholdPolicy::Max).unwrap());
    }

    #[test]
    fn metrics_bounds_and_permutation(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..80), seed in any::<u64>()) {
        let flags: Vec<bool> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let m = metrics(&confusion(&flags, &labels).unwrap());
        for v in [m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-15);
        if m.precision > 0.0 && m.recall > 0.0 {
            let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            prop_assert!((m.f1 - h).abs() < 1e-12);
        }
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        idx.shuffle(&mut rng(seed));
        let pf: Vec<bool> = idx.iter().map(|&i| flags[i]).collect();
        let pl: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        prop_assert_eq!(m, metrics(&confusion(&pf, &pl).unwrap()));
    }
}
