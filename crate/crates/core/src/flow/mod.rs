//! Graphical residual flows: stacks of masked, spectrally normalized
//! residual blocks whose Jacobians are triangular under a topological
//! ordering of the graph, so the log-determinant is a sum of log-diagonals.

mod block;
pub mod checkpoint;
pub mod lipmish;
pub mod spectral;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use block::{BlockOutput, BlockVars, EffectiveBlock, MaskedLayer, ResidualBlock, INITIAL_BETA};

use crate::autodiff::{Gradients, Tape, Var};
use crate::graph::DagGraph;
use crate::masks::MaskError;
use crate::tensor::{Tensor2, TensorError};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid flow configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `ln(2π)`
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Standard-normal log-density of a row.
pub fn base_log_prob(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * LN_2PI
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub steps: usize,
    pub hidden_widths: Vec<usize>,
    pub lip_bound: f64,
    pub seed: u64,
}

impl FlowConfig {
    pub fn new(steps: usize, width: usize, seed: u64) -> Self {
        Self {
            steps,
            hidden_widths: vec![width],
            lip_bound: 0.99,
            seed,
        }
    }
}

/// `F = f_T ∘ … ∘ f_1` over the variables of `graph`, optionally
/// conditioned on extra inputs that are concatenated into every block.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualFlow {
    graph: DagGraph,
    conditioning: Vec<String>,
    blocks: Vec<ResidualBlock>,
}

/// Taped handles of every block.
#[derive(Debug, Clone)]
pub struct FlowVars {
    pub blocks: Vec<BlockVars>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutput {
    pub z: Tensor2,
    pub logdet: Vec<f64>,
}

impl ResidualFlow {
    pub fn new(graph: DagGraph, conditioning: Vec<String>, cfg: &FlowConfig) -> Result<Self, FlowError> {
        if cfg.steps == 0 {
            return Err(FlowError::InvalidConfig("need at least one step".into()));
        }
        if cfg.hidden_widths.is_empty() {
            return Err(FlowError::InvalidConfig("need at least one hidden layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let cond_dim = conditioning.len();
        let blocks = (0..cfg.steps)
            .map(|_| {
                let mask_seed = rng.next_u64();
                let init_seed = rng.next_u64();
                ResidualBlock::new(
                    &graph,
                    cond_dim,
                    &cfg.hidden_widths,
                    cfg.lip_bound,
                    mask_seed,
                    init_seed,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            graph,
            conditioning,
            blocks,
        })
    }

    pub(crate) fn from_parts(
        graph: DagGraph,
        conditioning: Vec<String>,
        blocks: Vec<ResidualBlock>,
    ) -> Self {
        Self {
            graph,
            conditioning,
            blocks,
        }
    }

    pub fn graph(&self) -> &DagGraph {
        &self.graph
    }

    pub fn conditioning(&self) -> &[String] {
        &self.conditioning
    }

    pub fn dim(&self) -> usize {
        self.graph.len()
    }

    pub fn cond_dim(&self) -> usize {
        self.conditioning.len()
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ResidualBlock] {
        &mut self.blocks
    }

    pub fn steps(&self) -> usize {
        self.blocks.len()
    }

    pub fn lip_bound(&self) -> f64 {
        self.blocks[0].lip_bound()
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(ResidualBlock::parameter_count).sum()
    }

    /// Sets every weight and bias to zero, making each block the identity.
    pub fn zero_weights(&mut self) {
        for b in &mut self.blocks {
            for l in &mut b.layers {
                l.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
                l.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// One power-iteration step on every layer, as done once per training step.
    pub fn advance_power_iteration(&mut self) {
        self.blocks.iter_mut().for_each(ResidualBlock::advance_power_iteration);
    }

    /// Runs power iteration to convergence; done before evaluation and saving.
    pub fn refresh_spectral_state(&mut self) {
        self.blocks.iter_mut().for_each(ResidualBlock::refresh_spectral_state);
    }

    /// All parameter slices, block by block.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.blocks.iter_mut().flat_map(ResidualBlock::params_mut).collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.blocks.iter().flat_map(ResidualBlock::params).collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> FlowVars {
        FlowVars {
            blocks: self.blocks.iter().map(|b| b.bind(tape, trainable)).collect(),
        }
    }

    /// Gradients aligned with [`Self::params_mut`].
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients, vars: &FlowVars) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .zip(&vars.blocks)
            .flat_map(|(b, v)| b.collect_grads(tape, grads, v))
            .collect()
    }

    /// Taped `F(x; cond)`; returns `z` and the `batch x 1` log-determinant.
    pub fn tape_forward(
        &self,
        tape: &mut Tape,
        vars: &FlowVars,
        x: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var), FlowError> {
        let mut h = x;
        let mut logdet: Option<Var> = None;
        for (b, v) in self.blocks.iter().zip(&vars.blocks) {
            let (y, ld) = b.tape_forward(tape, v, h, cond)?;
            h = y;
            logdet = Some(match logdet {
                Some(acc) => tape.add(acc, ld)?,
                None => ld,
            });
        }
        Ok((h, logdet.expect("at least one block")))
    }

    /// Taped standard-normal log-density of each row, `batch x 1`.
    pub fn tape_base_log_prob(tape: &mut Tape, z: Var) -> Result<Var, FlowError> {
        let d = tape.value(z).cols() as f64;
        let sq = tape.mul(z, z)?;
        let s = tape.row_sum(sq);
        let s = tape.scale(s, -0.5);
        Ok(tape.add_const(s, -0.5 * d * LN_2PI))
    }

    /// Taped `log p(x | cond)`, `batch x 1`.
    pub fn tape_log_prob(
        &self,
        tape: &mut Tape,
        vars: &FlowVars,
        x: Var,
        cond: Option<Var>,
    ) -> Result<Var, FlowError> {
        let (z, logdet) = self.tape_forward(tape, vars, x, cond)?;
        let base = Self::tape_base_log_prob(tape, z)?;
        Ok(tape.add(base, logdet)?)
    }

    /// Frozen view using the current power-iteration state.
    pub fn effective(&self) -> EffectiveFlow {
        EffectiveFlow {
            blocks: self.blocks.iter().map(ResidualBlock::effective).collect(),
            dim: self.dim(),
            cond_dim: self.cond_dim(),
        }
    }

    pub fn forward(&self, x: &Tensor2, cond: Option<&Tensor2>) -> Result<FlowOutput, FlowError> {
        self.effective().forward(x, cond)
    }

    pub fn log_prob(&self, x: &Tensor2, cond: Option<&Tensor2>) -> Result<Vec<f64>, FlowError> {
        self.effective().log_prob(x, cond)
    }
}

/// A flow with fixed effective weights. Cheap to evaluate repeatedly and
/// safe to share across threads.
#[derive(Debug, Clone)]
pub struct EffectiveFlow {
    pub blocks: Vec<EffectiveBlock>,
    pub dim: usize,
    pub cond_dim: usize,
}

impl EffectiveFlow {
    pub fn forward(&self, x: &Tensor2, cond: Option<&Tensor2>) -> Result<FlowOutput, FlowError> {
        let mut h = x.clone();
        let mut logdet = vec![0.0; x.rows()];
        for b in &self.blocks {
            let out = b.forward(&h, cond)?;
            for (r, ld) in logdet.iter_mut().enumerate() {
                *ld += out.diag.row(r).iter().map(|d| d.ln()).sum::<f64>();
            }
            h = out.y;
        }
        Ok(FlowOutput { z: h, logdet })
    }

    /// `F(x)` without the log-determinant.
    pub fn transform(&self, x: &Tensor2, cond: Option<&Tensor2>) -> Result<Tensor2, FlowError> {
        let mut h = x.clone();
        for b in &self.blocks {
            let g = b.residual(&h, cond)?;
            h = h.add(&g)?;
        }
        Ok(h)
    }

    pub fn log_prob(&self, x: &Tensor2, cond: Option<&Tensor2>) -> Result<Vec<f64>, FlowError> {
        let out = self.forward(x, cond)?;
        Ok((0..x.rows())
            .map(|r| base_log_prob(out.z.row(r)) + out.logdet[r])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_graph;

    fn chain() -> DagGraph {
        parse_graph("a; b; c; a -> b; b -> c").unwrap()
    }

    #[test]
    fn identity_flow_is_standard_normal() {
        let mut f = ResidualFlow::new(
            parse_graph("a; b; a -> b").unwrap(),
            vec![],
            &FlowConfig::new(1, 8, 0),
        )
        .unwrap();
        f.zero_weights();
        let lp = f.log_prob(&Tensor2::zeros(1, 2), None).unwrap();
        assert!((lp[0] + LN_2PI).abs() < 1e-12);
        let out = f.forward(&Tensor2::from_rows(&[[0.3, -2.0]]), None).unwrap();
        assert_eq!(out.logdet, vec![0.0]);
    }

    #[test]
    fn tape_and_plain_paths_agree_bitwise() {
        let f = ResidualFlow::new(chain(), vec![], &FlowConfig::new(2, 16, 3)).unwrap();
        let x = Tensor2::from_rows(&[[0.2, -1.0, 0.7], [1.5, 0.3, -0.4]]);
        let plain = f.log_prob(&x, None).unwrap();
        let mut tape = Tape::new();
        let vars = f.bind(&mut tape, true);
        let xv = tape.constant(x);
        let lp = f.tape_log_prob(&mut tape, &vars, xv, None).unwrap();
        assert_eq!(tape.value(lp).data(), plain.as_slice());
    }

    #[test]
    fn deep_blocks_use_generic_diagonal() {
        let cfg = FlowConfig {
            steps: 1,
            hidden_widths: vec![12, 10],
            lip_bound: 0.9,
            seed: 5,
        };
        let f = ResidualFlow::new(chain(), vec![], &cfg).unwrap();
        let eff = f.effective();
        let x = [0.4, -0.2, 1.1];
        let out = eff.blocks[0].forward(&Tensor2::row_vector(&x), None).unwrap();
        let jac = eff.blocks[0].jacobian(&x, None).unwrap();
        for j in 0..3 {
            assert!((out.diag.get(0, j) - jac.get(j, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_zero_steps() {
        let cfg = FlowConfig::new(0, 8, 0);
        assert!(ResidualFlow::new(chain(), vec![], &cfg).is_err());
    }
}
