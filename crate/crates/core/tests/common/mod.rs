#![allow(dead_code)]

use grflow::flow::{EffectiveFlow, FlowConfig, ResidualFlow};
use grflow::graph::DagGraph;
use grflow::tensor::Tensor2;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random DAG on `d` nodes: edges drawn with probability `p` along a random
/// hidden order, nodes declared in a shuffled order.
pub fn random_dag(d: usize, p: f64, seed: u64) -> DagGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(&mut rng);
    let names: Vec<String> = (0..d).map(|i| format!("v{i}")).collect();
    let mut edges = Vec::new();
    for a in 0..d {
        for b in a + 1..d {
            if rng.random::<f64>() < p {
                edges.push((names[order[a]].clone(), names[order[b]].clone()));
            }
        }
    }
    DagGraph::new(&names, &edges, &[]).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor2 {
    let data = (0..rows * cols).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

/// Flow with every parameter redrawn uniformly in `[-scale, scale]` and a
/// converged spectral state, so tests do not depend on the near-identity
/// initialisation.
pub fn random_flow(g: DagGraph, cond: Vec<String>, steps: usize, width: usize, seed: u64) -> ResidualFlow {
    let cfg = FlowConfig::new(steps, width, seed);
    let mut f = ResidualFlow::new(g, cond, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    for p in f.params_mut() {
        for v in p.iter_mut() {
            *v = 2.0 * rng.random::<f64>() - 1.0;
        }
    }
    f.refresh_spectral_state();
    f
}

/// Central-difference Jacobian of `f` at `x`, `out x in`.
pub fn numeric_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> DMatrix<f64> {
    let m = f(x).len();
    let mut j = DMatrix::zeros(m, x.len());
    let mut xp = x.to_vec();
    for c in 0..x.len() {
        xp[c] = x[c] + h;
        let a = f(&xp);
        xp[c] = x[c] - h;
        let b = f(&xp);
        xp[c] = x[c];
        for r in 0..m {
            j[(r, c)] = (a[r] - b[r]) / (2.0 * h);
        }
    }
    j
}

pub fn flow_map<'a>(f: &'a EffectiveFlow, cond: Option<&'a [f64]>) -> impl Fn(&[f64]) -> Vec<f64> + 'a {
    move |x| {
        let ct = cond.map(Tensor2::row_vector);
        f.transform(&Tensor2::row_vector(x), ct.as_ref()).unwrap().into_vec()
    }
}

pub fn to_dmatrix(t: &Tensor2) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub fn largest_singular_value(t: &Tensor2) -> f64 {
    to_dmatrix(t).singular_values().max()
}

/// Kendall's tau between position and value.
pub fn kendall_tau(v: &[f64]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += (v[j] - v[i]).signum();
        }
    }
    s / (n * (n - 1) / 2) as f64
}
