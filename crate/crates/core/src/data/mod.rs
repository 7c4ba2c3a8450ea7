//! Datasets: synthetic Bayesian-network samplers with exact joint
//! densities, CSV ingestion and train/test splits.

mod csv_io;
mod synthetic;

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

pub use csv_io::{load_csv, read_matrix, write_matrix, Split};
pub use synthetic::{
    arithmetic_circuit, conjugate_gaussian, sample_arithmetic_circuit, sample_tree, tree,
    ArithmeticCircuit, ConjugateGaussian, Tree, GMM2_MEANS, GMM8_MEANS,
};

use crate::graph::DagGraph;
use crate::tensor::Tensor2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: missing column `{name}`")]
    MissingColumn { path: String, name: String },
    #[error("{path}: line {line}, column `{column}`: cannot parse `{value}` as a number")]
    NonNumeric {
        path: String,
        line: u64,
        column: String,
        value: String,
    },
    #[error("{path}: line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        path: String,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{path}: need at least {needed} rows, found {found}")]
    RowShortfall {
        path: String,
        needed: usize,
        found: usize,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Exact `log p(row)` of a Bayesian network, with its gradient. Rows are in
/// graph node order.
pub trait JointDensity: Send + Sync + std::fmt::Debug {
    fn graph(&self) -> &DagGraph;

    fn log_density(&self, row: &[f64]) -> f64;

    /// `∂ log p / ∂ row`. Where the density is not differentiable (a tie in
    /// `max`, a Laplace mode), any subgradient is returned.
    fn gradient(&self, row: &[f64]) -> Vec<f64>;

    /// Individual conditional log-density terms in node order.
    fn terms(&self, row: &[f64]) -> Vec<f64>;
}

/// Train/test matrices over a graph, in graph column order.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub name: String,
    pub graph: DagGraph,
    pub train: Tensor2,
    pub test: Tensor2,
    pub joint: Option<Arc<dyn JointDensity>>,
    /// Per-column `(mean, std)` of the raw training split when standardized.
    pub standardization: Option<Vec<(f64, f64)>>,
    /// Modelling assumptions baked into the data, e.g. `normal_scale = std`.
    pub metadata: BTreeMap<String, String>,
}

impl DatasetBundle {
    /// Z-scores both splits with statistics of the training split.
    pub fn standardize(&mut self) -> Result<(), DataError> {
        if self.standardization.is_some() {
            return Ok(());
        }
        let stats = column_stats(&self.train)?;
        apply_standardization(&mut self.train, &stats);
        apply_standardization(&mut self.test, &stats);
        self.standardization = Some(stats);
        Ok(())
    }

    /// Indices of observed and latent columns.
    pub fn observed_columns(&self) -> Vec<usize> {
        self.graph.observed_indices()
    }

    pub fn latent_columns(&self) -> Vec<usize> {
        self.graph.latent_indices()
    }
}

/// Mean and population standard deviation of each column.
pub fn column_stats(m: &Tensor2) -> Result<Vec<(f64, f64)>, DataError> {
    if m.rows() < 2 {
        return Err(DataError::Invalid("need two rows to standardize".into()));
    }
    let n = m.rows() as f64;
    (0..m.cols())
        .map(|c| {
            let mean = (0..m.rows()).map(|r| m.get(r, c)).sum::<f64>() / n;
            let var = (0..m.rows()).map(|r| (m.get(r, c) - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd > 0.0 {
                Ok((mean, sd))
            } else {
                Err(DataError::Invalid(format!("column {c} is constant")))
            }
        })
        .collect()
}

pub fn apply_standardization(m: &mut Tensor2, stats: &[(f64, f64)]) {
    for r in 0..m.rows() {
        for (v, &(mu, sd)) in m.row_mut(r).iter_mut().zip(stats) {
            *v = (*v - mu) / sd;
        }
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `log N(v; mean, sd)`.
pub fn normal_log_density(v: f64, mean: f64, sd: f64) -> f64 {
    let z = (v - mean) / sd;
    -0.5 * z * z - sd.ln() - HALF_LN_2PI
}

/// `log Laplace(v; loc, scale)`.
pub fn laplace_log_density(v: f64, loc: f64, scale: f64) -> f64 {
    -std::f64::consts::LN_2 - scale.ln() - (v - loc).abs() / scale
}

/// Equal-weight mixture of unit-covariance 2-D Gaussians.
pub fn gmm_log_density(p: [f64; 2], means: &[[f64; 2]]) -> f64 {
    let logs: Vec<f64> = means.iter().map(|m| gmm_component(p, m)).collect();
    log_sum_exp(&logs) - (means.len() as f64).ln()
}

/// Gradient of [`gmm_log_density`].
pub fn gmm_gradient(p: [f64; 2], means: &[[f64; 2]]) -> [f64; 2] {
    let logs: Vec<f64> = means.iter().map(|m| gmm_component(p, m)).collect();
    let lse = log_sum_exp(&logs);
    let mut g = [0.0; 2];
    for (l, m) in logs.iter().zip(means) {
        let w = (l - lse).exp();
        g[0] -= w * (p[0] - m[0]);
        g[1] -= w * (p[1] - m[1]);
    }
    g
}

fn gmm_component(p: [f64; 2], m: &[f64; 2]) -> f64 {
    let (a, b) = (p[0] - m[0], p[1] - m[1]);
    -0.5 * (a * a + b * b) - 2.0 * HALF_LN_2PI
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_density_at_mode() {
        assert!((normal_log_density(0.0, 0.0, 1.0) + HALF_LN_2PI).abs() < 1e-15);
        assert!((normal_log_density(7.0, 7.0, 2.0) + HALF_LN_2PI + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gmm_gradient_matches_difference_quotient() {
        let means = GMM8_MEANS;
        let p = [0.3, -0.7];
        let g = gmm_gradient(p, &means);
        let h = 1e-6;
        for k in 0..2 {
            let mut a = p;
            let mut b = p;
            a[k] += h;
            b[k] -= h;
            let fd = (gmm_log_density(a, &means) - gmm_log_density(b, &means)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn standardize_centres_train_split() {
        let mut b = tree(200, 50, 3);
        b.standardize().unwrap();
        for (c, (mu, sd)) in column_stats(&b.train).unwrap().into_iter().enumerate() {
            assert!(mu.abs() < 1e-10, "column {c}");
            assert!((sd - 1.0).abs() < 1e-10, "column {c}");
        }
    }
}
