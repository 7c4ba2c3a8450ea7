use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    gmm_gradient, gmm_log_density, laplace_log_density, normal_log_density, DatasetBundle,
    JointDensity,
};
use crate::graph::{arithmetic_circuit_graph, parse_graph, tree_graph, DagGraph};
use crate::tensor::Tensor2;

pub const GMM2_MEANS: [[f64; 2]; 2] = [[1.0, 1.0], [-1.0, -1.0]];

pub const GMM8_MEANS: [[f64; 2]; 8] = [
    [0.0, 1.5],
    [1.0, 1.0],
    [1.5, 0.0],
    [1.0, -1.0],
    [0.0, -1.5],
    [-1.0, -1.0],
    [-1.5, 0.0],
    [-1.0, 1.0],
];

const NOISE: f64 = 0.1;

fn normal(rng: &mut impl Rng, mean: f64, sd: f64) -> f64 {
    let e: f64 = rng.sample(StandardNormal);
    mean + sd * e
}

/// Inverse-CDF draw; `rand_distr` has no Laplace distribution.
fn laplace(rng: &mut impl Rng, loc: f64, scale: f64) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    loc - scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

fn gmm(rng: &mut impl Rng, means: &[[f64; 2]]) -> [f64; 2] {
    let m = means[rng.random_range(0..means.len())];
    [normal(rng, m[0], 1.0), normal(rng, m[1], 1.0)]
}

/// `∂/∂v` and `∂/∂mean` of [`normal_log_density`].
fn normal_grads(v: f64, mean: f64, sd: f64) -> (f64, f64) {
    let g = (v - mean) / (sd * sd);
    (-g, g)
}

fn laplace_grad(v: f64, loc: f64) -> f64 {
    -(v - loc).signum() * f64::from(v != loc)
}

fn metadata(extra: &[(&str, &str)]) -> BTreeMap<String, String> {
    let mut m = BTreeMap::from([("normal_scale".to_string(), "std".to_string())]);
    for (k, v) in extra {
        m.insert(k.to_string(), v.to_string());
    }
    m
}

fn split(all: Tensor2, n_train: usize) -> (Tensor2, Tensor2) {
    let n = all.rows();
    let train = all.slice_rows(0, n_train).expect("within rows");
    let test = all.slice_rows(n_train, n).expect("within rows");
    (train, test)
}

/// Heavy-tailed network with non-linear links over
/// `z0..z5, x0, x1`.
#[derive(Debug, Clone)]
pub struct ArithmeticCircuit {
    graph: DagGraph,
}

impl ArithmeticCircuit {
    pub fn new(with_latents: bool) -> Self {
        Self {
            graph: arithmetic_circuit_graph(with_latents),
        }
    }
}

pub fn sample_arithmetic_circuit(n: usize, rng: &mut impl Rng) -> Tensor2 {
    let mut out = Tensor2::zeros(n, 8);
    for r in 0..n {
        let z0 = laplace(rng, 5.0, 1.0);
        let z1 = laplace(rng, -2.0, 1.0);
        let z2 = normal(rng, (z0 + z1 - 2.8).tanh(), NOISE);
        let z3 = normal(rng, z0 * z1, NOISE);
        let z4 = normal(rng, 7.0, 2.0);
        let z5 = normal(rng, (z3 + z4).tanh(), NOISE);
        let x0 = normal(rng, z3, NOISE);
        let x1 = normal(rng, z5, NOISE);
        out.row_mut(r)
            .copy_from_slice(&[z0, z1, z2, z3, z4, z5, x0, x1]);
    }
    out
}

impl JointDensity for ArithmeticCircuit {
    fn graph(&self) -> &DagGraph {
        &self.graph
    }

    fn terms(&self, v: &[f64]) -> Vec<f64> {
        let [z0, z1, z2, z3, z4, z5, x0, x1] = v[..8] else {
            panic!("arithmetic circuit rows have 8 entries")
        };
        vec![
            laplace_log_density(z0, 5.0, 1.0),
            laplace_log_density(z1, -2.0, 1.0),
            normal_log_density(z2, (z0 + z1 - 2.8).tanh(), NOISE),
            normal_log_density(z3, z0 * z1, NOISE),
            normal_log_density(z4, 7.0, 2.0),
            normal_log_density(z5, (z3 + z4).tanh(), NOISE),
            normal_log_density(x0, z3, NOISE),
            normal_log_density(x1, z5, NOISE),
        ]
    }

    fn log_density(&self, v: &[f64]) -> f64 {
        self.terms(v).iter().sum()
    }

    fn gradient(&self, v: &[f64]) -> Vec<f64> {
        let [z0, z1, z2, z3, z4, z5, x0, x1] = v[..8] else {
            panic!("arithmetic circuit rows have 8 entries")
        };
        let mut g = vec![0.0; 8];
        g[0] += laplace_grad(z0, 5.0);
        g[1] += laplace_grad(z1, -2.0);

        let t2 = (z0 + z1 - 2.8).tanh();
        let (dv, dm) = normal_grads(z2, t2, NOISE);
        g[2] += dv;
        g[0] += dm * (1.0 - t2 * t2);
        g[1] += dm * (1.0 - t2 * t2);

        let (dv, dm) = normal_grads(z3, z0 * z1, NOISE);
        g[3] += dv;
        g[0] += dm * z1;
        g[1] += dm * z0;

        g[4] += normal_grads(z4, 7.0, 2.0).0;

        let t5 = (z3 + z4).tanh();
        let (dv, dm) = normal_grads(z5, t5, NOISE);
        g[5] += dv;
        g[3] += dm * (1.0 - t5 * t5);
        g[4] += dm * (1.0 - t5 * t5);

        let (dv, dm) = normal_grads(x0, z3, NOISE);
        g[6] += dv;
        g[3] += dm;

        let (dv, dm) = normal_grads(x1, z5, NOISE);
        g[7] += dv;
        g[5] += dm;
        g
    }
}

/// `n_train + n_test` samples from one seeded stream, split in order.
pub fn arithmetic_circuit(n_train: usize, n_test: usize, seed: u64) -> DatasetBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, test) = split(sample_arithmetic_circuit(n_train + n_test, &mut rng), n_train);
    DatasetBundle {
        name: "arithmetic-circuit".into(),
        graph: arithmetic_circuit_graph(true),
        train,
        test,
        joint: Some(Arc::new(ArithmeticCircuit::new(true))),
        standardization: None,
        metadata: metadata(&[("laplace", "location, scale")]),
    }
}

/// Mixture-driven network over `z0..z5, x0`.
#[derive(Debug, Clone)]
pub struct Tree {
    graph: DagGraph,
}

impl Tree {
    pub fn new(with_latents: bool) -> Self {
        Self {
            graph: tree_graph(with_latents),
        }
    }
}

fn tree_mean(z4: f64, z5: f64) -> f64 {
    let s = z4 + z5;
    0.5 * (s.sin() + s.cos())
}

pub fn sample_tree(n: usize, rng: &mut impl Rng) -> Tensor2 {
    let mut out = Tensor2::zeros(n, 7);
    for r in 0..n {
        let [z0, z1] = gmm(rng, &GMM2_MEANS);
        let [z2, z3] = gmm(rng, &GMM8_MEANS);
        let z4 = normal(rng, z0.max(z1), 1.0);
        let z5 = normal(rng, z2.min(z3), 1.0);
        let x0 = normal(rng, tree_mean(z4, z5), 1.0);
        out.row_mut(r).copy_from_slice(&[z0, z1, z2, z3, z4, z5, x0]);
    }
    out
}

impl JointDensity for Tree {
    fn graph(&self) -> &DagGraph {
        &self.graph
    }

    /// The two mixtures contribute one joint term each, reported on the
    /// first variable of the pair; the second slot is zero.
    fn terms(&self, v: &[f64]) -> Vec<f64> {
        let [z0, z1, z2, z3, z4, z5, x0] = v[..7] else {
            panic!("tree rows have 7 entries")
        };
        vec![
            gmm_log_density([z0, z1], &GMM2_MEANS),
            0.0,
            gmm_log_density([z2, z3], &GMM8_MEANS),
            0.0,
            normal_log_density(z4, z0.max(z1), 1.0),
            normal_log_density(z5, z2.min(z3), 1.0),
            normal_log_density(x0, tree_mean(z4, z5), 1.0),
        ]
    }

    fn log_density(&self, v: &[f64]) -> f64 {
        self.terms(v).iter().sum()
    }

    fn gradient(&self, v: &[f64]) -> Vec<f64> {
        let [z0, z1, z2, z3, z4, z5, x0] = v[..7] else {
            panic!("tree rows have 7 entries")
        };
        let mut g = vec![0.0; 7];
        let a = gmm_gradient([z0, z1], &GMM2_MEANS);
        g[0] += a[0];
        g[1] += a[1];
        let b = gmm_gradient([z2, z3], &GMM8_MEANS);
        g[2] += b[0];
        g[3] += b[1];

        let (dv, dm) = normal_grads(z4, z0.max(z1), 1.0);
        g[4] += dv;
        g[if z0 >= z1 { 0 } else { 1 }] += dm;

        let (dv, dm) = normal_grads(z5, z2.min(z3), 1.0);
        g[5] += dv;
        g[if z2 <= z3 { 2 } else { 3 }] += dm;

        let s = z4 + z5;
        let (dv, dm) = normal_grads(x0, tree_mean(z4, z5), 1.0);
        g[6] += dv;
        let ds = dm * 0.5 * (s.cos() - s.sin());
        g[4] += ds;
        g[5] += ds;
        g
    }
}

pub fn tree(n_train: usize, n_test: usize, seed: u64) -> DatasetBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, test) = split(sample_tree(n_train + n_test, &mut rng), n_train);
    DatasetBundle {
        name: "tree".into(),
        graph: tree_graph(true),
        train,
        test,
        joint: Some(Arc::new(Tree::new(true))),
        standardization: None,
        metadata: metadata(&[("gmm_covariance", "identity")]),
    }
}

/// `z ~ N(0, 1)`, `x | z ~ N(z, 1)`; the evidence is `N(x; 0, √2)`.
#[derive(Debug, Clone)]
pub struct ConjugateGaussian {
    graph: DagGraph,
}

impl Default for ConjugateGaussian {
    fn default() -> Self {
        Self {
            graph: parse_graph("z; x; z -> x; latent z").expect("builtin graph"),
        }
    }
}

impl ConjugateGaussian {
    pub fn log_evidence(x: f64) -> f64 {
        normal_log_density(x, 0.0, std::f64::consts::SQRT_2)
    }
}

impl JointDensity for ConjugateGaussian {
    fn graph(&self) -> &DagGraph {
        &self.graph
    }

    fn terms(&self, v: &[f64]) -> Vec<f64> {
        vec![normal_log_density(v[0], 0.0, 1.0), normal_log_density(v[1], v[0], 1.0)]
    }

    fn log_density(&self, v: &[f64]) -> f64 {
        self.terms(v).iter().sum()
    }

    fn gradient(&self, v: &[f64]) -> Vec<f64> {
        let (z, x) = (v[0], v[1]);
        vec![-z + (x - z), -(x - z)]
    }
}

pub fn conjugate_gaussian(n_train: usize, n_test: usize, seed: u64) -> DatasetBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = Tensor2::zeros(n_train + n_test, 2);
    for r in 0..all.rows() {
        let z = normal(&mut rng, 0.0, 1.0);
        let x = normal(&mut rng, z, 1.0);
        all.row_mut(r).copy_from_slice(&[z, x]);
    }
    let (train, test) = split(all, n_train);
    let joint = ConjugateGaussian::default();
    DatasetBundle {
        name: "conjugate-gaussian".into(),
        graph: joint.graph.clone(),
        train,
        test,
        joint: Some(Arc::new(joint)),
        standardization: None,
        metadata: metadata(&[]),
    }
}
