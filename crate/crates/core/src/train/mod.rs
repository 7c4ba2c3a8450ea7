//! Maximum-likelihood and variational training.

mod adam;
mod presets;
mod schedule;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

pub use adam::Adam;
pub use presets::{preset, Preset, PRESETS};
pub use schedule::{lr_schedule, Plateau};

use crate::autodiff::Tape;
use crate::data::{DatasetBundle, JointDensity};
use crate::flow::{base_log_prob, EffectiveFlow, FlowError, ResidualFlow};
use crate::graph::{DagGraph, GraphError};
use crate::tensor::Tensor2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr:e})")]
    NonFinite { epoch: usize, batch: usize, lr: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Flow(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mle,
    Elbo,
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mle" => Ok(Objective::Mle),
            "elbo" => Ok(Objective::Elbo),
            other => Err(format!("unknown objective `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub patience: usize,
    pub lr_min: f64,
    pub seed: u64,
    pub objective: Objective,
    /// Monte Carlo samples per observation in the training ELBO.
    pub elbo_samples: usize,
    /// Monte Carlo samples per observation in the test ELBO.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 100,
            lr: 0.01,
            lr_decay_factor: 10.0,
            patience: 10,
            lr_min: 1e-6,
            seed: 0,
            objective: Objective::Mle,
            elbo_samples: 1,
            eval_samples: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 || self.elbo_samples == 0 || self.eval_samples == 0 {
            return bad("batch size and sample counts must be positive");
        }
        if !(self.lr > 0.0 && self.lr_min > 0.0 && self.lr_min < self.lr) {
            return bad("need 0 < lr_min < lr");
        }
        if !(self.lr_decay_factor > 1.0) || self.patience == 0 {
            return bad("decay factor must exceed 1 and patience must be positive");
        }
        Ok(())
    }
}

/// Links an inference flow over latent variables to the joint density of
/// the full network.
#[derive(Debug, Clone)]
pub struct InferenceTask {
    pub joint: Arc<dyn JointDensity>,
    /// Full-graph column of each flow variable.
    pub latent_index: Vec<usize>,
    /// Full-graph column of each conditioning input.
    pub observed_index: Vec<usize>,
    /// Structure the inference flow is built on.
    pub graph: DagGraph,
    pub conditioning: Vec<String>,
}

impl InferenceTask {
    pub fn new(joint: Arc<dyn JointDensity>) -> Result<Self, TrainError> {
        let inv = joint.graph().invert_for_inference()?;
        Ok(Self {
            latent_index: inv.latent_index,
            observed_index: inv.observed_index,
            graph: inv.graph,
            conditioning: inv.conditioning,
            joint,
        })
    }

    pub fn full_dim(&self) -> usize {
        self.latent_index.len() + self.observed_index.len()
    }

    /// Observed columns of full-graph rows.
    pub fn observations(&self, rows: &Tensor2) -> Tensor2 {
        let mut out = Tensor2::zeros(rows.rows(), self.observed_index.len());
        for r in 0..rows.rows() {
            for (o, &c) in out.row_mut(r).iter_mut().zip(&self.observed_index) {
                *o = rows.get(r, c);
            }
        }
        out
    }

    /// `log p(x, z)` and `∂/∂z` for each row; non-finite rows come back as
    /// `None`.
    pub fn joint_terms(&self, z: &Tensor2, x: &Tensor2) -> Vec<Option<(f64, Vec<f64>)>> {
        let mut full = vec![0.0; self.full_dim()];
        (0..z.rows())
            .map(|r| {
                for (&c, &v) in self.latent_index.iter().zip(z.row(r)) {
                    full[c] = v;
                }
                for (&c, &v) in self.observed_index.iter().zip(x.row(r)) {
                    full[c] = v;
                }
                let lp = self.joint.log_density(&full);
                if !lp.is_finite() {
                    return None;
                }
                let g = self.joint.gradient(&full);
                let gz: Vec<f64> = self.latent_index.iter().map(|&c| g[c]).collect();
                gz.iter().all(|v| v.is_finite()).then_some((lp, gz))
            })
            .collect()
    }
}

fn repeat_rows(x: &Tensor2, k: usize) -> Tensor2 {
    if k == 1 {
        return x.clone();
    }
    let idx: Vec<usize> = (0..x.rows()).flat_map(|r| std::iter::repeat_n(r, k)).collect();
    x.gather_rows(&idx)
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor2::from_vec(rows, cols, data).expect("sizes agree")
}

/// Loss and gradients aligned with [`ResidualFlow::params_mut`].
#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    /// Rows excluded because the joint density was not finite.
    pub masked: usize,
}

/// `−mean log p(x)` and its gradient at the current parameters and
/// power-iteration state.
pub fn mle_loss_and_grads(flow: &ResidualFlow, batch: &Tensor2) -> Result<LossAndGrads, TrainError> {
    let mut tape = Tape::new();
    let vars = flow.bind(&mut tape, true);
    let x = tape.constant(batch.clone());
    let lp = flow.tape_log_prob(&mut tape, &vars, x, None)?;
    let s = tape.sum(lp);
    let loss = tape.scale(s, -1.0 / batch.rows() as f64);
    let grads = tape.backward(loss)?;
    Ok(LossAndGrads {
        loss: tape.value(loss).as_scalar()?,
        grads: flow.collect_grads(&tape, &grads, &vars),
        masked: 0,
    })
}

/// `−mean ELBO` for observations `x` with fixed base draws `eps` (one row
/// per observation row), and its gradient. The flow runs generatively:
/// `z = F(ε; x)` and `log q(z | x) = log p₀(ε) − log|det J_F(ε)|`.
pub fn elbo_loss_and_grads(
    flow: &ResidualFlow,
    x: &Tensor2,
    eps: &Tensor2,
    task: &InferenceTask,
) -> Result<LossAndGrads, TrainError> {
    let mut tape = Tape::new();
    let vars = flow.bind(&mut tape, true);
    let e = tape.constant(eps.clone());
    let c = tape.constant(x.clone());
    let (z, logdet) = flow.tape_forward(&mut tape, &vars, e, Some(c))?;
    let terms = task.joint_terms(tape.value(z), x);
    let n = eps.rows();
    let mut values = Tensor2::zeros(n, 1);
    let mut grad = Tensor2::zeros(n, task.latent_index.len());
    let mut weight = Tensor2::zeros(n, 1);
    let mut base = Tensor2::zeros(n, 1);
    let mut kept = 0usize;
    for (r, t) in terms.into_iter().enumerate() {
        if let Some((lp, g)) = t {
            values.set(r, 0, lp);
            grad.row_mut(r).copy_from_slice(&g);
            weight.set(r, 0, 1.0);
            base.set(r, 0, base_log_prob(eps.row(r)));
            kept += 1;
        }
    }
    let masked = n - kept;
    if kept == 0 {
        return Ok(LossAndGrads {
            loss: f64::NAN,
            grads: flow.params().iter().map(|p| vec![0.0; p.len()]).collect(),
            masked,
        });
    }
    let joint = tape.row_function(z, values, grad)?;
    let w = tape.constant(weight);
    let base = tape.constant(base);
    // ELBO_r = log p(x, z) − log p₀(ε) + log|det|
    let elbo = tape.sub(joint, base)?;
    let elbo = tape.add(elbo, logdet)?;
    let elbo = tape.mul(elbo, w)?;
    let s = tape.sum(elbo);
    let loss = tape.scale(s, -1.0 / kept as f64);
    let grads = tape.backward(loss)?;
    Ok(LossAndGrads {
        loss: tape.value(loss).as_scalar()?,
        grads: flow.collect_grads(&tape, &grads, &vars),
        masked,
    })
}

/// One Adam update on the negative log-likelihood of `batch`. Advances the
/// power iteration once before the forward pass.
pub fn mle_step(flow: &mut ResidualFlow, batch: &Tensor2, opt: &mut Adam) -> Result<f64, TrainError> {
    flow.advance_power_iteration();
    let lg = mle_loss_and_grads(flow, batch)?;
    if lg.loss.is_finite() && lg.grads.iter().flatten().all(|g| g.is_finite()) {
        opt.update(flow.params_mut(), &lg.grads);
    }
    Ok(lg.loss)
}

/// Outcome of one ELBO update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboStep {
    pub loss: f64,
    pub masked: usize,
}

/// One Adam update on the negative ELBO with `samples` draws per
/// observation.
pub fn elbo_step(
    flow: &mut ResidualFlow,
    x: &Tensor2,
    task: &InferenceTask,
    samples: usize,
    rng: &mut impl Rng,
    opt: &mut Adam,
) -> Result<ElboStep, TrainError> {
    flow.advance_power_iteration();
    let xr = repeat_rows(x, samples);
    let eps = standard_normal(xr.rows(), flow.dim(), rng);
    let lg = elbo_loss_and_grads(flow, &xr, &eps, task)?;
    if lg.loss.is_finite() && lg.grads.iter().flatten().all(|g| g.is_finite()) {
        opt.update(flow.params_mut(), &lg.grads);
    }
    Ok(ElboStep {
        loss: lg.loss,
        masked: lg.masked,
    })
}

/// Mean log-likelihood of the rows of `x`.
pub fn mean_log_likelihood(flow: &EffectiveFlow, x: &Tensor2) -> Result<f64, TrainError> {
    let lp = flow.log_prob(x, None)?;
    Ok(lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Per-row single-draw ELBO for fixed base draws; `None` where the joint
/// density is not finite.
pub fn elbo_values(
    flow: &EffectiveFlow,
    x: &Tensor2,
    eps: &Tensor2,
    task: &InferenceTask,
) -> Result<Vec<Option<f64>>, TrainError> {
    let out = flow.forward(eps, Some(x))?;
    Ok(task
        .joint_terms(&out.z, x)
        .into_iter()
        .enumerate()
        .map(|(r, t)| t.map(|(lp, _)| lp - base_log_prob(eps.row(r)) + out.logdet[r]))
        .collect())
}

/// Monte Carlo ELBO averaged over observations, `samples` draws each.
/// Draws with a non-finite joint density count as `-∞`.
pub fn mean_elbo(
    flow: &EffectiveFlow,
    x: &Tensor2,
    task: &InferenceTask,
    samples: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xr = repeat_rows(x, samples);
    let eps = standard_normal(xr.rows(), flow.dim, &mut rng);
    let vals = elbo_values(flow, &xr, &eps, task)?;
    Ok(vals.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).sum::<f64>() / vals.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Test log-likelihood or test ELBO; higher is better.
    pub test_metric: f64,
    /// Training samples dropped for a non-finite joint density.
    pub masked: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub flow: ResidualFlow,
    /// Parameters at the epoch with the best test metric.
    pub best: ResidualFlow,
    pub best_epoch: Option<usize>,
    pub metrics: Vec<EpochMetrics>,
    /// Test metric of the final parameters.
    pub final_test: f64,
}

/// Builds the flow for `bundle` and `objective`: the full graph with every
/// node observed for MLE, the inverted latent graph for ELBO.
pub fn build_flow(
    bundle: &DatasetBundle,
    objective: Objective,
    cfg: &crate::flow::FlowConfig,
) -> Result<(ResidualFlow, Option<InferenceTask>), TrainError> {
    match objective {
        Objective::Mle => Ok((ResidualFlow::new(bundle.graph.all_observed(), vec![], cfg)?, None)),
        Objective::Elbo => {
            let joint = bundle
                .joint
                .clone()
                .ok_or_else(|| TrainError::Config(format!("{} has no joint density", bundle.name)))?;
            let task = InferenceTask::new(joint)?;
            let flow = ResidualFlow::new(task.graph.clone(), task.conditioning.clone(), cfg)?;
            Ok((flow, Some(task)))
        }
    }
}

fn test_metric(
    flow: &mut ResidualFlow,
    test: &Tensor2,
    task: Option<&InferenceTask>,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    flow.refresh_spectral_state();
    let eff = flow.effective();
    match task {
        None => mean_log_likelihood(&eff, test),
        Some(t) => mean_elbo(&eff, &t.observations(test), t, cfg.eval_samples, cfg.seed ^ 0x7e57),
    }
}

/// Trains `flow` on `bundle`. `task` is required for the ELBO objective.
/// `on_epoch` sees each epoch's metrics as they are produced.
pub fn train(
    mut flow: ResidualFlow,
    bundle: &DatasetBundle,
    task: Option<&InferenceTask>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let train_x = match (cfg.objective, task) {
        (Objective::Mle, _) => bundle.train.clone(),
        (Objective::Elbo, Some(t)) => t.observations(&bundle.train),
        (Objective::Elbo, None) => {
            return Err(TrainError::Config("ELBO training needs an inference task".into()))
        }
    };
    let task = if cfg.objective == Objective::Elbo { task } else { None };
    let expected = if task.is_some() { flow.cond_dim() } else { flow.dim() };
    if train_x.cols() != expected {
        return Err(TrainError::Config(format!(
            "data has {} columns, flow expects {expected}",
            train_x.cols()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::for_params(&flow.params(), cfg.lr);
    let mut plateau = Plateau::new(cfg.lr_decay_factor, cfg.patience, cfg.lr_min);
    let mut order: Vec<usize> = (0..train_x.rows()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best = flow.clone();
    let mut best_epoch = None;
    let mut best_metric = f64::NEG_INFINITY;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        let mut masked = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train_x.gather_rows(chunk);
            let loss = match task {
                None => mle_step(&mut flow, &batch, &mut opt)?,
                Some(t) => {
                    let s = elbo_step(&mut flow, &batch, t, cfg.elbo_samples, &mut rng, &mut opt)?;
                    masked += s.masked;
                    s.loss
                }
            };
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    lr: opt.lr,
                });
            }
            total += loss;
            batches += 1;
        }
        let train_loss = total / batches.max(1) as f64;
        let lr_used = opt.lr;
        opt.lr = plateau.observe(train_loss, opt.lr);
        let test = test_metric(&mut flow, &bundle.test, task, cfg)?;
        if test > best_metric {
            best_metric = test;
            best = flow.clone();
            best_epoch = Some(epoch);
        }
        let m = EpochMetrics {
            epoch,
            lr: lr_used,
            train_loss,
            test_metric: test,
            masked,
        };
        on_epoch(&m);
        metrics.push(m);
    }

    let final_test = match metrics.last() {
        Some(m) => m.test_metric,
        None => test_metric(&mut flow, &bundle.test, task, cfg)?,
    };
    if best_epoch.is_none() {
        best = flow.clone();
    }
    Ok(TrainOutcome {
        flow,
        best,
        best_epoch,
        metrics,
        final_test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{conjugate_gaussian, tree};
    use crate::flow::{FlowConfig, LN_2PI};

    #[test]
    fn identity_flow_loss_at_origin() {
        let b = tree(10, 10, 0);
        let (mut f, _) = build_flow(&b, Objective::Mle, &FlowConfig::new(2, 16, 0)).unwrap();
        f.zero_weights();
        let lg = mle_loss_and_grads(&f, &Tensor2::zeros(1, 7)).unwrap();
        assert!((lg.loss - 3.5 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_leaves_flow_unchanged() {
        let b = tree(50, 20, 0);
        let (f, _) = build_flow(&b, Objective::Mle, &FlowConfig::new(2, 16, 0)).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.epochs = 0;
        let mut expected = f.clone();
        expected.refresh_spectral_state();
        let out = train(f.clone(), &b, None, &cfg, |_| {}).unwrap();
        assert_eq!(out.flow.params(), f.params());
        assert_eq!(out.flow, expected);
        assert!(out.metrics.is_empty());
        assert!(out.final_test.is_finite());
    }

    #[test]
    fn elbo_is_finite_for_identity_posterior() {
        let b = conjugate_gaussian(20, 20, 1);
        let (mut f, task) = build_flow(&b, Objective::Elbo, &FlowConfig::new(1, 8, 0)).unwrap();
        f.zero_weights();
        let task = task.unwrap();
        let x = task.observations(&b.test);
        let elbo = mean_elbo(&f.effective(), &x, &task, 4, 0).unwrap();
        assert!(elbo.is_finite());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.lr_min = 0.1;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }
}
