mod common;

use common::{random_dag, random_flow, random_matrix};
use grflow::flow::{FlowConfig, ResidualFlow};
use grflow::graph::parse_graph;
use grflow::inversion::{
    banach_invert_block, error_curves, grid_search_inversion, invert_flow, newton_invert_block, write_rows,
    InversionConfig, Method,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn newton_recovers_preimages(d in 1usize..6, p in 0.0f64..1.0, steps in 1usize..4, seed in any::<u64>()) {
        let f = random_flow(random_dag(d, p, seed), vec![], steps, 2 * d + 2, seed).effective();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(5, d, 2.0, &mut rng);
        let z = f.transform(&x, None).unwrap();
        let (xh, rep) = invert_flow(&f, &z, None, &InversionConfig::newton(1.0, 50)).unwrap();
        prop_assert_eq!(rep.converged_count(), 5);
        for s in &rep.samples {
            prop_assert!(s.recon_error < 1e-4);
            prop_assert_eq!(s.iterations.len(), steps);
        }
        // residual blocks are bijective, so the preimage is unique
        prop_assert!(max_abs(xh.data(), x.data()) < 1e-3);
    }

    #[test]
    fn banach_recovers_preimages(d in 1usize..5, seed in any::<u64>()) {
        let f = random_flow(random_dag(d, 0.5, seed), vec![], 2, 2 * d + 2, seed).effective();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(4, d, 2.0, &mut rng);
        let z = f.transform(&x, None).unwrap();
        let (xh, rep) = invert_flow(&f, &z, None, &InversionConfig::banach(5000)).unwrap();
        prop_assert_eq!(rep.converged_count(), 4);
        prop_assert!(max_abs(xh.data(), x.data()) < 1e-2);
    }

    #[test]
    fn converged_implies_small_error(seed in any::<u64>(), alpha in 0.1f64..1.9, n in 1usize..20) {
        let f = random_flow(random_dag(4, 0.6, seed), vec![], 3, 8, seed).effective();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random_matrix(6, 4, 3.0, &mut rng);
        let cfg = InversionConfig { tol: 1e-6, ..InversionConfig::newton(alpha, n) };
        let (_, rep) = invert_flow(&f, &z, None, &cfg).unwrap();
        for s in &rep.samples {
            prop_assert!(!s.converged || s.recon_error < cfg.tol);
            prop_assert!(s.iterations.iter().all(|&k| k <= n));
        }
    }
}

#[test]
fn conditional_flow_inverts_given_conditioning() {
    let g = parse_graph("a; b\na -> b").unwrap();
    let f = random_flow(g, vec!["o".into()], 3, 6, 4).effective();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_matrix(10, 2, 2.0, &mut rng);
    let c = random_matrix(10, 1, 2.0, &mut rng);
    let z = f.transform(&x, Some(&c)).unwrap();
    let (xh, rep) = invert_flow(&f, &z, Some(&c), &InversionConfig::newton(1.0, 50)).unwrap();
    assert_eq!(rep.converged_count(), 10);
    assert!(max_abs(xh.data(), x.data()) < 1e-3);
}

#[test]
fn single_block_solvers_agree() {
    let f = random_flow(random_dag(4, 0.7, 8), vec![], 1, 8, 8).effective();
    let b = &f.blocks[0];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_matrix(6, 4, 2.0, &mut rng);
    let y = b.forward(&x, None).unwrap().y;
    let tight = InversionConfig { tol: 1e-10, ..InversionConfig::newton(1.0, 100) };
    let (xn, sn) = newton_invert_block(b, &y, None, &tight).unwrap();
    let (xb, sb) = banach_invert_block(b, &y, None, &InversionConfig { tol: 1e-10, ..InversionConfig::banach(20_000) }).unwrap();
    assert!(sn.iter().chain(&sb).all(|s| s.converged && s.residual < 1e-10));
    assert!(max_abs(xn.data(), x.data()) < 1e-8);
    assert!(max_abs(xb.data(), x.data()) < 1e-8);
    let newton_iters: usize = sn.iter().map(|s| s.iterations).sum();
    let banach_iters: usize = sb.iter().map(|s| s.iterations).sum();
    assert!(newton_iters < banach_iters);
}

#[test]
fn grid_search_matches_exhaustive_evaluation() {
    let f = random_flow(random_dag(3, 0.8, 21), vec![], 2, 6, 21).effective();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_matrix(8, 3, 2.0, &mut rng);
    let z = f.transform(&x, None).unwrap();
    let alphas = [0.5, 1.0, 1.5];
    let budgets: Vec<usize> = (1..=12).collect();
    let tol = 1e-4;
    let grid = grid_search_inversion(&f, &z, None, Method::Newton, &alphas, &budgets, tol).unwrap();

    // errors[a][n][s] from independent full-batch runs
    let mut errors = vec![vec![vec![0.0; 8]; budgets.len()]; alphas.len()];
    for (ai, &a) in alphas.iter().enumerate() {
        for (ni, &n) in budgets.iter().enumerate() {
            let cfg = InversionConfig {
                fixed_iters: true,
                tol,
                ..InversionConfig::newton(a, n)
            };
            let (_, rep) = invert_flow(&f, &z, None, &cfg).unwrap();
            for (s, r) in rep.samples.iter().enumerate() {
                errors[ai][ni][s] = r.recon_error;
            }
        }
    }
    for s in 0..8 {
        let mut best: Option<(usize, f64, f64)> = None;
        for (ai, &a) in alphas.iter().enumerate() {
            for (ni, &n) in budgets.iter().enumerate() {
                if errors[ai][ni][s] < tol {
                    let key = (n, (a - 1.0).abs(), a);
                    if best.is_none_or(|b| key < b) {
                        best = Some(key);
                    }
                }
            }
        }
        let got = &grid.per_sample[s];
        assert_eq!(got.n, best.map(|b| b.0), "sample {s}");
        assert_eq!(got.alpha, best.map(|b| b.2), "sample {s}");
    }
    let counts: Vec<Vec<usize>> = errors
        .iter()
        .map(|per_n| per_n.iter().map(|e| e.iter().filter(|&&v| v < tol).count()).collect())
        .collect();
    let max_count = counts.iter().flatten().copied().max().unwrap();
    assert_eq!(grid.batch_converged, max_count);
    let ai = alphas.iter().position(|&a| a == grid.batch_alpha).unwrap();
    assert_eq!(counts[ai][grid.batch_n - 1], max_count);
}

#[test]
fn banach_converges_faster_with_smaller_bound() {
    let g = random_dag(4, 0.7, 5);
    let flows: Vec<_> = [0.5, 0.99]
        .iter()
        .map(|&c| {
            let mut cfg = FlowConfig::new(3, 8, 5);
            cfg.lip_bound = c;
            let mut f = ResidualFlow::new(g.clone(), vec![], &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for p in f.params_mut() {
                p.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
            }
            f.refresh_spectral_state();
            f.effective()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = random_matrix(20, 4, 2.0, &mut rng);
    let mean_at = |f: &grflow::flow::EffectiveFlow, k: usize| {
        let curves = error_curves(f, &z, None, Method::Banach, 1.0, 10).unwrap();
        curves.iter().map(|c| c[k]).sum::<f64>() / curves.len() as f64
    };
    for k in [3, 6, 10] {
        assert!(mean_at(&flows[0], k) < mean_at(&flows[1], k));
    }
}

#[test]
fn invalid_settings_are_rejected() {
    for cfg in [
        InversionConfig::newton(0.0, 10),
        InversionConfig::newton(2.0, 10),
        InversionConfig::newton(1.0, 0),
        InversionConfig { tol: 0.0, ..InversionConfig::default() },
        InversionConfig { block_tol: Some(-1.0), ..InversionConfig::default() },
    ] {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    // α is irrelevant for Banach
    assert!(InversionConfig { alpha: 5.0, ..InversionConfig::banach(10) }.validate().is_ok());
}

#[test]
fn report_csv_has_expected_columns() {
    let f = random_flow(random_dag(2, 1.0, 1), vec![], 1, 4, 1).effective();
    let z = random_matrix(3, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let (_, rep) = invert_flow(&f, &z, None, &InversionConfig::default()).unwrap();
    let mut buf = Vec::new();
    write_rows(&rep.rows(), &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("sample_id,method,alpha,N_used,recon_error,micros"));
    assert_eq!(lines.count(), 3);
}
