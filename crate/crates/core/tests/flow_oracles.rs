mod common;

use common::{flow_map, largest_singular_value, numeric_jacobian, random_dag, random_flow};
use grflow::autodiff::Activation;
use grflow::flow::{checkpoint, FlowConfig, ResidualFlow};
use grflow::flow::lipmish::LipMish;
use grflow::graph::{parse_graph, DagGraph};
use grflow::tensor::Tensor2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_rows(n: usize, d: usize, scale: f64, rng: &mut impl Rng) -> Tensor2 {
    common::random_matrix(n, d, scale, rng)
}

fn conditional_graph() -> (DagGraph, Vec<String>) {
    let g = parse_graph("a; b; c\na -> b; a -> c; b -> c").unwrap();
    (g, vec!["o1".into(), "o2".into()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn logdet_matches_numeric_determinant(d in 1usize..6, p in 0.0f64..1.0, steps in 1usize..4, seed in any::<u64>()) {
        let g = random_dag(d, p, seed);
        let f = random_flow(g, vec![], steps, 2 * d + 2, seed).effective();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let out = f.forward(&Tensor2::row_vector(&x), None).unwrap();
        let j = numeric_jacobian(flow_map(&f, None), &x, 1e-5);
        let det = j.determinant();
        prop_assert!(det > 0.0);
        prop_assert!((out.logdet[0] - det.ln()).abs() < 1e-6, "{} vs {}", out.logdet[0], det.ln());
    }

    #[test]
    fn conditional_logdet_ignores_conditioning_columns(seed in any::<u64>()) {
        let (g, cond) = conditional_graph();
        let f = random_flow(g, cond, 2, 6, seed).effective();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let out = f.forward(&Tensor2::row_vector(&x), Some(&Tensor2::row_vector(&c))).unwrap();
        let det = numeric_jacobian(flow_map(&f, Some(&c)), &x, 1e-5).determinant();
        prop_assert!((out.logdet[0] - det.ln()).abs() < 1e-6);
    }

    #[test]
    fn effective_weights_respect_spectral_bound(d in 1usize..7, p in 0.0f64..1.0, seed in any::<u64>(), c in 0.1f64..0.99) {
        let g = random_dag(d, p, seed);
        let mut cfg = FlowConfig::new(2, 2 * d + 3, seed);
        cfg.lip_bound = c;
        let mut f = ResidualFlow::new(g, vec![], &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in f.params_mut() {
            for v in p.iter_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
        }
        f.refresh_spectral_state();
        for b in &f.effective().blocks {
            for w in &b.weights {
                prop_assert!(largest_singular_value(w) <= c + 1e-6);
            }
        }
    }

    #[test]
    fn blocks_are_bi_lipschitz(d in 1usize..6, p in 0.0f64..1.0, seed in any::<u64>()) {
        let g = random_dag(d, p, seed);
        let f = random_flow(g, vec![], 2, 2 * d + 2, seed);
        let c = f.lip_bound();
        let eff = f.effective();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for b in &eff.blocks {
            for _ in 0..10 {
                let a = random_rows(1, d, 3.0, &mut rng);
                let e = random_rows(1, d, 3.0, &mut rng);
                let fa = b.forward(&a, None).unwrap().y;
                let fe = b.forward(&e, None).unwrap().y;
                let dx = norm(a.sub(&e).unwrap().data());
                let dy = norm(fa.sub(&fe).unwrap().data());
                let ga = b.residual(&a, None).unwrap();
                let ge = b.residual(&e, None).unwrap();
                let dg = norm(ga.sub(&ge).unwrap().data());
                prop_assert!(dg <= c * dx + 1e-12);
                prop_assert!(dy <= (1.0 + c) * dx + 1e-12);
                prop_assert!(dy >= (1.0 - c) * dx - 1e-12);
            }
        }
    }

    #[test]
    fn log_prob_is_row_equivariant(d in 1usize..6, p in 0.0f64..1.0, seed in any::<u64>(), n in 1usize..12) {
        let g = random_dag(d, p, seed);
        let f = random_flow(g, vec![], 2, 2 * d + 2, seed).effective();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_rows(n, d, 2.0, &mut rng);
        let batch = f.log_prob(&x, None).unwrap();
        let rev: Vec<usize> = (0..n).rev().collect();
        let batch_rev = f.log_prob(&x.gather_rows(&rev), None).unwrap();
        for r in 0..n {
            let single = f.log_prob(&x.slice_rows(r, r + 1).unwrap(), None).unwrap()[0];
            prop_assert!((batch[r] - single).abs() < 1e-12);
            prop_assert!((batch_rev[n - 1 - r] - single).abs() < 1e-12);
        }
    }

    #[test]
    fn lipmish_derivatives_match_finite_differences(x in -8.0f64..8.0, beta in -3.0f64..3.0) {
        let h = 1e-5;
        let v = LipMish.eval(x, beta);
        let fd1 = (LipMish.eval(x + h, beta).value - LipMish.eval(x - h, beta).value) / (2.0 * h);
        let fd2 = (LipMish.eval(x + h, beta).d1 - LipMish.eval(x - h, beta).d1) / (2.0 * h);
        let fdb = (LipMish.eval(x, beta + h).value - LipMish.eval(x, beta - h).value) / (2.0 * h);
        let fd1b = (LipMish.eval(x, beta + h).d1 - LipMish.eval(x, beta - h).d1) / (2.0 * h);
        prop_assert!((v.d1 - fd1).abs() < 1e-7 * (1.0 + v.d1.abs()));
        prop_assert!((v.d2 - fd2).abs() < 1e-6 * (1.0 + v.d2.abs()));
        prop_assert!((v.d_beta - fdb).abs() < 1e-6 * (1.0 + v.d_beta.abs()));
        prop_assert!((v.d1_beta - fd1b).abs() < 1e-6 * (1.0 + v.d1_beta.abs()));
        prop_assert!(v.d1.abs() <= 1.0 + 1e-6);
    }
}

/// Trapezoid rule for `∫ exp(log_prob)` over `[-half, half]²`.
fn mass(f: &grflow::flow::EffectiveFlow, half: f64, h: f64) -> f64 {
    let n = (2.0 * half / h).round() as usize;
    let mut pts = Vec::with_capacity((n + 1) * (n + 1));
    for i in 0..=n {
        for j in 0..=n {
            pts.push([-half + i as f64 * h, -half + j as f64 * h]);
        }
    }
    let lp = f.log_prob(&Tensor2::from_rows(&pts), None).unwrap();
    let w = |k: usize| if k == 0 || k == n { 0.5 } else { 1.0 };
    let mut total = 0.0;
    for i in 0..=n {
        for j in 0..=n {
            total += w(i) * w(j) * lp[i * (n + 1) + j].exp();
        }
    }
    total * h * h
}

#[test]
fn density_integrates_to_one_in_two_dimensions() {
    let g = parse_graph("a; b\na -> b").unwrap();
    let init = ResidualFlow::new(g.clone(), vec![], &FlowConfig::new(2, 6, 11)).unwrap();
    let m = mass(&init.effective(), 6.0, 0.04);
    assert!((m - 1.0).abs() < 2e-3, "initial flow mass {m}");
    // strongly non-linear weights move mass further out
    let f = random_flow(g, vec![], 2, 6, 11).effective();
    let m = mass(&f, 20.0, 0.05);
    assert!((m - 1.0).abs() < 1e-6, "random flow mass {m}");
}

#[test]
fn checkpoint_round_trip_reproduces_log_prob() {
    let dir = tempfile::tempdir().unwrap();
    let (g, cond) = conditional_graph();
    let f = random_flow(g, cond, 3, 7, 5);
    let path = dir.path().join("flow.json");
    checkpoint::save(&f, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, f);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_rows(20, 3, 2.0, &mut rng);
    let c = random_rows(20, 2, 2.0, &mut rng);
    let a = f.log_prob(&x, Some(&c)).unwrap();
    let b = back.log_prob(&x, Some(&c)).unwrap();
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() <= 1e-12);
    }
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let (g, cond) = conditional_graph();
    let text = checkpoint::to_json(&random_flow(g, cond, 1, 4, 1));
    assert!(checkpoint::from_json(&text.replacen("\"beta\"", "\"bet\"", 1)).is_err());
    assert!(checkpoint::from_json("{}").is_err());
}
