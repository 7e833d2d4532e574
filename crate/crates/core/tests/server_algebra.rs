mod common;

use common::{alpha_ascent, js_quadrature, random_params, random_tensor, seeded, weighted_mean};
use fediih::client::{FederatedParams, PosteriorSummary, PriorConfig};
use fediih::server::{
    fedavg, federation_weights, js_divergence, kl_diag, separate_federate, update_global_alpha, weight_matrix,
    AlphaMode, DiagGaussian, JsMethod,
};
use fediih::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn gaussian(dim: usize) -> impl Strategy<Value = DiagGaussian> {
    (prop::collection::vec(-3.0f64..3.0, dim), prop::collection::vec(0.05f64..4.0, dim))
        .prop_map(|(m, v)| DiagGaussian::new(m, v).unwrap())
}

#[test]
fn one_dimensional_js_near_quadrature() {
    let mut rng = seeded(4);
    for _ in 0..20 {
        let (m1, m2) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let (v1, v2) = (rng.random_range(0.2..3.0), rng.random_range(0.2..3.0));
        let p = DiagGaussian::new(vec![m1], vec![v1]).unwrap();
        let q = DiagGaussian::new(vec![m2], vec![v2]).unwrap();
        let exact = js_quadrature(m1, v1, m2, v2);
        let est = js_divergence(&p, &q, JsMethod::default()).unwrap();
        assert!((est - exact).abs() <= 0.05, "{m1} {v1} {m2} {v2}: {est} vs {exact}");
    }
}

#[test]
fn moment_matched_js_is_exact_for_equal_means() {
    // equal means and variances: both estimators give zero
    let p = DiagGaussian::new(vec![0.5, -1.0], vec![1.0, 2.0]).unwrap();
    assert_eq!(js_divergence(&p, &p.clone(), JsMethod::MomentMatched).unwrap(), 0.0);
    let q = DiagGaussian::new(vec![0.5, -1.0], vec![1.0, 2.5]).unwrap();
    let mm = js_divergence(&p, &q, JsMethod::MomentMatched).unwrap();
    let mc = js_divergence(&p, &q, JsMethod::default()).unwrap();
    assert!(mm > 0.0 && mc > 0.0);
}

#[test]
fn global_latent_matches_numerical_maximizer() {
    let mut rng = seeded(8);
    for _ in 0..50 {
        let m = rng.random_range(1..=5);
        let j = rng.random_range(1..=6);
        let prior = PriorConfig {
            sigma2_alpha: rng.random_range(0.2..3.0),
            sigma2_h: rng.random_range(0.05..2.0),
        };
        let mus: Vec<Vec<f64>> = (0..m).map(|_| (0..j).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let summaries: Vec<PosteriorSummary> = mus
            .iter()
            .map(|mu| PosteriorSummary {
                mu_hat: vec![mu.clone()],
                var_hat: vec![vec![1.0; j]],
                n: 10,
            })
            .collect();
        let got = update_global_alpha(&summaries, &prior, AlphaMode::Deterministic, 0).unwrap();
        let want = alpha_ascent(&mus, prior.sigma2_h, prior.sigma2_alpha);
        for (a, b) in got.alpha_tilde[0].data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn tiny_tau_recovers_plain_mean() {
    let mut rng = seeded(9);
    let params: Vec<FederatedParams> = (0..4).map(|_| random_params(&mut rng, 2, 3, 2, 3)).collect();
    let s = random_tensor(&mut rng, 4, 4, 1.0);
    let beta = vec![weight_matrix(&s, 1e-9), weight_matrix(&s, 1e-9)];
    let out = separate_federate(&params, &beta).unwrap();
    let uniform = [0.25; 4];
    for p in &out {
        for f in 0..2 {
            let want = weighted_mean(&params.iter().map(|q| &q.weights[f]).collect::<Vec<_>>(), &uniform);
            assert!(p.weights[f].max_abs_diff(&want) <= 1e-6);
        }
        let want = weighted_mean(&params.iter().map(|q| &q.cls_weight).collect::<Vec<_>>(), &uniform);
        assert!(p.cls_weight.max_abs_diff(&want) <= 1e-6);
    }
}

#[test]
fn uniform_single_factor_equals_fedavg() {
    let mut rng = seeded(10);
    let params: Vec<FederatedParams> = (0..3).map(|_| random_params(&mut rng, 1, 4, 3, 2)).collect();
    let beta = vec![Tensor::filled(3, 3, 1.0 / 3.0)];
    let sep = separate_federate(&params, &beta).unwrap();
    let avg = fedavg(&params, &[7, 7, 7]).unwrap();
    for p in &sep {
        assert!(p.weights[0].max_abs_diff(&avg.weights[0]) <= 1e-10);
        assert!(p.biases[0].max_abs_diff(&avg.biases[0]) <= 1e-10);
        assert!(p.cls_weight.max_abs_diff(&avg.cls_weight) <= 1e-10);
    }
}

proptest! {
    #[test]
    fn divergence_identities(p in gaussian(3), q in gaussian(3)) {
        prop_assert_eq!(kl_diag(&p, &p), 0.0);
        prop_assert_eq!(js_divergence(&p, &p, JsMethod::default()).unwrap(), 0.0);
        for method in [JsMethod::default(), JsMethod::MomentMatched] {
            let a = js_divergence(&p, &q, method).unwrap();
            let b = js_divergence(&q, &p, method).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
        prop_assert!(kl_diag(&p, &q) >= -1e-12);
    }

    #[test]
    fn weight_rows_are_stochastic(s in prop::collection::vec(-1.0f64..1.0, 1..8), tau in 0.0f64..100.0) {
        let w = federation_weights(&s, tau);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        // larger similarity never gets less weight
        for a in 0..s.len() {
            for b in 0..s.len() {
                if s[a] > s[b] {
                    prop_assert!(w[a] >= w[b]);
                }
            }
        }
    }

    #[test]
    fn identical_clients_are_a_fixed_point(seed in 0u64..1000, m in 1usize..6) {
        let mut rng = seeded(seed);
        let one = random_params(&mut rng, 2, 3, 2, 4);
        let params = vec![one.clone(); m];
        let s = random_tensor(&mut rng, m, m, 1.0);
        let beta = vec![weight_matrix(&s, 10.0), weight_matrix(&s, 3.0)];
        for p in separate_federate(&params, &beta).unwrap() {
            prop_assert!(p.max_abs_diff(&one) <= 1e-12);
        }
    }

    #[test]
    fn federation_stays_in_the_convex_hull(seed in 0u64..1000) {
        let mut rng = seeded(seed);
        let params: Vec<FederatedParams> = (0..4).map(|_| random_params(&mut rng, 2, 2, 2, 2)).collect();
        let s = random_tensor(&mut rng, 4, 4, 1.0);
        let beta = vec![weight_matrix(&s, 5.0), weight_matrix(&s, 5.0)];
        let out = separate_federate(&params, &beta).unwrap();
        for p in &out {
            for f in 0..2 {
                for (i, v) in p.weights[f].data().iter().enumerate() {
                    let lo = params.iter().map(|q| q.weights[f].data()[i]).fold(f64::INFINITY, f64::min);
                    let hi = params.iter().map(|q| q.weights[f].data()[i]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
                }
            }
        }
    }
}
