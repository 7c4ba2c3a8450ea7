//! Numerical inversion of residual flows.
//!
//! Blocks are inverted one at a time in reverse order, either with the
//! diagonal-preconditioned update `x ← x − α·(f(x) − y) / diag J_f(x)` or
//! with the Banach iteration `x ← y − g(x)`. Both start from `x = y`.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::flow::{EffectiveBlock, EffectiveFlow, FlowError};
use crate::tensor::Tensor2;

#[derive(Debug, Error)]
pub enum InversionError {
    #[error("invalid inversion config: {0}")]
    Config(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Newton,
    Banach,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Newton => "newton",
            Method::Banach => "banach",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "newton" => Ok(Method::Newton),
            "banach" => Ok(Method::Banach),
            other => Err(format!("unknown inversion method `{other}`")),
        }
    }
}

/// Diagonal entries below this abort the Newton update.
pub const MIN_DIAG: f64 = 1e-12;

const REFINE_FACTOR: f64 = 100.0;
const MIN_BLOCK_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InversionConfig {
    pub method: Method,
    pub alpha: f64,
    /// Iteration budget per block.
    pub max_iters: usize,
    /// End-to-end tolerance on `‖F(x̂) − z‖∞`.
    pub tol: f64,
    /// Per-block stopping tolerance on `‖f_t(x) − y‖∞`. `None` starts at
    /// `tol / T` and tightens it, warm-starting every block, while the
    /// end-to-end error is still above `tol` and budget remains.
    pub block_tol: Option<f64>,
    /// Run exactly `max_iters` iterations per block, as in a fixed-budget
    /// grid search.
    pub fixed_iters: bool,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            method: Method::Newton,
            alpha: 1.0,
            max_iters: 50,
            tol: 1e-4,
            block_tol: None,
            fixed_iters: false,
        }
    }
}

impl InversionConfig {
    pub fn newton(alpha: f64, max_iters: usize) -> Self {
        Self {
            alpha,
            max_iters,
            ..Self::default()
        }
    }

    pub fn banach(max_iters: usize) -> Self {
        Self {
            method: Method::Banach,
            max_iters,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), InversionError> {
        if self.method == Method::Newton && !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(InversionError::Config(format!(
                "alpha must lie in (0, 2), got {}",
                self.alpha
            )));
        }
        if self.max_iters == 0 {
            return Err(InversionError::Config("max_iters must be positive".into()));
        }
        if !(self.tol > 0.0) || self.block_tol.is_some_and(|t| !(t > 0.0)) {
            return Err(InversionError::Config("tolerances must be positive".into()));
        }
        Ok(())
    }

    fn block_tolerance(&self, steps: usize) -> f64 {
        self.block_tol.unwrap_or(self.tol / steps as f64)
    }
}

/// Outcome of inverting one block for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSolve {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `‖f(x) − y‖∞` at the returned point.
    pub residual: f64,
    pub converged: bool,
    /// Newton step refused because of a vanishing diagonal.
    pub aborted: bool,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn solve_block(
    b: &EffectiveBlock,
    y: &[f64],
    cond: Option<&[f64]>,
    cfg: &InversionConfig,
    tol: f64,
    start: &[f64],
    used: usize,
) -> Result<BlockSolve, FlowError> {
    let ct = cond.map(Tensor2::row_vector);
    let mut x = start.to_vec();
    let mut n = used;
    loop {
        let xt = Tensor2::row_vector(&x);
        let (fx, diag) = match cfg.method {
            Method::Newton => {
                let out = b.forward(&xt, ct.as_ref())?;
                (out.y.into_vec(), Some(out.diag.into_vec()))
            }
            Method::Banach => {
                let g = b.residual(&xt, ct.as_ref())?.into_vec();
                (x.iter().zip(&g).map(|(a, b)| a + b).collect(), None)
            }
        };
        let residual = max_abs_diff(&fx, y);
        let done = if cfg.fixed_iters {
            n == cfg.max_iters
        } else {
            residual < tol || n == cfg.max_iters
        };
        if done || !residual.is_finite() {
            return Ok(BlockSolve {
                x,
                iterations: n,
                converged: residual < tol,
                residual,
                aborted: false,
            });
        }
        match diag {
            Some(d) => {
                if d.iter().any(|&v| !(v >= MIN_DIAG)) {
                    return Ok(BlockSolve {
                        x,
                        iterations: n,
                        converged: false,
                        residual,
                        aborted: true,
                    });
                }
                for ((xi, (fi, yi)), di) in x.iter_mut().zip(fx.iter().zip(y)).zip(&d) {
                    *xi -= cfg.alpha * (fi - yi) / di;
                }
            }
            None => {
                // x + g(x) = fx, so y − g(x) = y − fx + x
                for (xi, (fi, yi)) in x.iter_mut().zip(fx.iter().zip(y)) {
                    *xi = yi - fi + *xi;
                }
            }
        }
        n += 1;
    }
}

fn batch_block(
    b: &EffectiveBlock,
    y: &Tensor2,
    cond: Option<&Tensor2>,
    cfg: &InversionConfig,
    method: Method,
) -> Result<(Tensor2, Vec<BlockSolve>), InversionError> {
    let cfg = InversionConfig { method, ..*cfg };
    cfg.validate()?;
    let tol = cfg.block_tol.unwrap_or(cfg.tol);
    let solves: Vec<BlockSolve> = (0..y.rows())
        .map(|r| solve_block(b, y.row(r), cond.map(|c| c.row(r)), &cfg, tol, y.row(r), 0))
        .collect::<Result<_, _>>()?;
    let rows: Vec<&[f64]> = solves.iter().map(|s| s.x.as_slice()).collect();
    Ok((Tensor2::from_rows(&rows), solves))
}

/// Newton-like inversion of a single block, row by row. The tolerance is
/// `block_tol`, falling back to `tol`.
pub fn newton_invert_block(
    b: &EffectiveBlock,
    y: &Tensor2,
    cond: Option<&Tensor2>,
    cfg: &InversionConfig,
) -> Result<(Tensor2, Vec<BlockSolve>), InversionError> {
    batch_block(b, y, cond, cfg, Method::Newton)
}

/// Banach fixed-point inversion of a single block, row by row.
pub fn banach_invert_block(
    b: &EffectiveBlock,
    y: &Tensor2,
    cond: Option<&Tensor2>,
    cfg: &InversionConfig,
) -> Result<(Tensor2, Vec<BlockSolve>), InversionError> {
    batch_block(b, y, cond, cfg, Method::Banach)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleReport {
    pub converged: bool,
    /// Iterations spent in each block, in forward block order.
    pub iterations: Vec<usize>,
    /// `‖F(x̂) − z‖∞`
    pub recon_error: f64,
    pub aborted: bool,
    pub micros: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InversionReport {
    pub config: InversionConfig,
    pub samples: Vec<SampleReport>,
    /// Wall time for the whole batch.
    pub micros: u64,
}

impl InversionReport {
    pub fn converged_count(&self) -> usize {
        self.samples.iter().filter(|s| s.converged).count()
    }

    /// Per-block iteration counts pooled over samples and blocks.
    pub fn block_iterations(&self) -> Vec<usize> {
        self.samples.iter().flat_map(|s| s.iterations.iter().copied()).collect()
    }

    pub fn median_block_iterations(&self) -> f64 {
        let mut v = self.block_iterations();
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_unstable();
        let m = v.len() / 2;
        if v.len() % 2 == 1 {
            v[m] as f64
        } else {
            (v[m - 1] + v[m]) as f64 / 2.0
        }
    }
}

fn invert_sample(
    f: &EffectiveFlow,
    z: &[f64],
    cond: Option<&[f64]>,
    cfg: &InversionConfig,
) -> Result<(Vec<f64>, SampleReport), FlowError> {
    let start = Instant::now();
    let steps = f.blocks.len();
    let mut tol = cfg.block_tolerance(steps);
    let mut iterations = vec![0; steps];
    // previous solution per block, the starting point of a refinement pass
    let mut solved: Vec<Option<Vec<f64>>> = vec![None; steps];
    let mut y;
    loop {
        y = z.to_vec();
        let mut all_ok = true;
        let mut aborted = false;
        for (t, b) in f.blocks.iter().enumerate().rev() {
            let init = match &solved[t] {
                Some(x) => x.as_slice(),
                None => y.as_slice(),
            };
            let s = solve_block(b, &y, cond, cfg, tol, init, iterations[t])?;
            iterations[t] = s.iterations;
            all_ok &= s.converged || cfg.fixed_iters;
            aborted |= s.aborted;
            solved[t] = Some(s.x.clone());
            y = s.x;
        }
        let xt = Tensor2::row_vector(&y);
        let fx = f.transform(&xt, cond.map(Tensor2::row_vector).as_ref())?;
        let recon_error = max_abs_diff(fx.data(), z);
        let exhausted = iterations.iter().all(|&n| n >= cfg.max_iters);
        let refine = cfg.block_tol.is_none()
            && !cfg.fixed_iters
            && all_ok
            && !aborted
            && recon_error >= cfg.tol
            && recon_error.is_finite()
            && tol > MIN_BLOCK_TOL
            && !exhausted;
        if !refine {
            let micros = start.elapsed().as_micros() as u64;
            return Ok((
                y,
                SampleReport {
                    converged: all_ok && !aborted && recon_error < cfg.tol,
                    iterations,
                    recon_error,
                    aborted,
                    micros,
                },
            ));
        }
        tol /= REFINE_FACTOR;
    }
}

/// Inverts `z = F(x; cond)` sample by sample. Non-convergence is recorded
/// per sample, never raised.
pub fn invert_flow(
    f: &EffectiveFlow,
    z: &Tensor2,
    cond: Option<&Tensor2>,
    cfg: &InversionConfig,
) -> Result<(Tensor2, InversionReport), InversionError> {
    cfg.validate()?;
    if z.cols() != f.dim {
        return Err(FlowError::Shape(format!("z has {} columns, flow has {}", z.cols(), f.dim)).into());
    }
    let start = Instant::now();
    let results: Vec<(Vec<f64>, SampleReport)> = (0..z.rows())
        .into_par_iter()
        .map(|r| invert_sample(f, z.row(r), cond.map(|c| c.row(r)), cfg))
        .collect::<Result<_, _>>()?;
    let micros = start.elapsed().as_micros() as u64;
    let rows: Vec<&[f64]> = results.iter().map(|(x, _)| x.as_slice()).collect();
    let x = if rows.is_empty() {
        Tensor2::zeros(0, f.dim)
    } else {
        Tensor2::from_rows(&rows)
    };
    Ok((
        x,
        InversionReport {
            config: *cfg,
            samples: results.into_iter().map(|(_, s)| s).collect(),
            micros,
        },
    ))
}

/// Step sizes `0.1, 0.2, …, 1.9`.
pub fn default_alphas() -> Vec<f64> {
    (1..=19).map(|t| t as f64 / 10.0).collect()
}

/// Budgets `1, 2, …, 50`.
pub fn default_budgets() -> Vec<usize> {
    (1..=50).collect()
}

/// Best settings found for one sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleBest {
    pub sample_id: usize,
    /// `None` when no cell of the grid reached the tolerance.
    pub alpha: Option<f64>,
    pub n: Option<usize>,
    pub recon_error: f64,
    pub micros: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSearch {
    pub method: Method,
    pub per_sample: Vec<SampleBest>,
    /// Settings under which the most samples converge.
    pub batch_alpha: f64,
    pub batch_n: usize,
    pub batch_converged: usize,
    /// Wall time of the batch inversion with the chosen settings.
    pub batch_micros: u64,
}

/// Orders settings: fewer iterations first, then α closer to 1, then smaller α.
fn better(a: (f64, usize), b: (f64, usize)) -> bool {
    let key = |(alpha, n): (f64, usize)| (n, (alpha - 1.0).abs(), alpha);
    let (ka, kb) = (key(a), key(b));
    ka.0 < kb.0 || (ka.0 == kb.0 && (ka.1 < kb.1 || (ka.1 == kb.1 && ka.2 < kb.2)))
}

fn fixed_cfg(method: Method, alpha: f64, n: usize, tol: f64) -> InversionConfig {
    InversionConfig {
        method,
        alpha,
        max_iters: n,
        tol,
        block_tol: None,
        fixed_iters: true,
    }
}

/// Per-sample search over `alphas x budgets` with a fixed iteration count
/// per block and no early stopping. A cell succeeds when
/// `‖F(x̂) − z‖∞ < tol`. The batch is then inverted once with the
/// settings that succeed on the most samples.
pub fn grid_search_inversion(
    f: &EffectiveFlow,
    z: &Tensor2,
    cond: Option<&Tensor2>,
    method: Method,
    alphas: &[f64],
    budgets: &[usize],
    tol: f64,
) -> Result<GridSearch, InversionError> {
    if alphas.is_empty() || budgets.is_empty() {
        return Err(InversionError::Config("empty search grid".into()));
    }
    let mut budgets = budgets.to_vec();
    budgets.sort_unstable();
    budgets.dedup();
    let alphas: Vec<f64> = match method {
        Method::Newton => alphas.to_vec(),
        Method::Banach => vec![1.0],
    };
    for &a in &alphas {
        fixed_cfg(method, a, budgets[0], tol).validate()?;
    }

    // success[s][a] = smallest budget index that converges
    let per_sample: Vec<(SampleBest, Vec<Option<usize>>)> = (0..z.rows())
        .into_par_iter()
        .map(|r| {
            let zr = z.row(r);
            let cr = cond.map(|c| c.row(r));
            let mut first_ok = Vec::with_capacity(alphas.len());
            let mut best: Option<(f64, usize, f64, u64)> = None;
            for &a in &alphas {
                let mut found = None;
                for (k, &n) in budgets.iter().enumerate() {
                    let cfg = fixed_cfg(method, a, n, tol);
                    let (_, rep) = invert_sample(f, zr, cr, &cfg)?;
                    if rep.recon_error < tol {
                        found = Some(k);
                        if best.is_none_or(|(ba, bn, _, _)| better((a, n), (ba, bn))) {
                            best = Some((a, n, rep.recon_error, rep.micros));
                        }
                        break;
                    }
                }
                first_ok.push(found);
            }
            let sb = match best {
                Some((a, n, e, us)) => SampleBest {
                    sample_id: r,
                    alpha: Some(a),
                    n: Some(n),
                    recon_error: e,
                    micros: us,
                },
                None => {
                    let cfg = fixed_cfg(method, 1.0, *budgets.last().expect("non-empty"), tol);
                    let (_, rep) = invert_sample(f, zr, cr, &cfg)?;
                    SampleBest {
                        sample_id: r,
                        alpha: None,
                        n: None,
                        recon_error: rep.recon_error,
                        micros: rep.micros,
                    }
                }
            };
            Ok((sb, first_ok))
        })
        .collect::<Result<_, FlowError>>()?;

    // A sample converges at (α, N) when its first success for α is at or
    // below N. That monotonicity is assumed by the batch choice only.
    let mut chosen = (alphas[0], budgets[budgets.len() - 1]);
    let mut chosen_count = 0usize;
    for (ai, &a) in alphas.iter().enumerate() {
        for (k, &n) in budgets.iter().enumerate() {
            let count = per_sample
                .iter()
                .filter(|(_, ok)| ok[ai].is_some_and(|j| j <= k))
                .count();
            if count > chosen_count || (count == chosen_count && count > 0 && better((a, n), chosen)) {
                chosen = (a, n);
                chosen_count = count;
            }
        }
    }
    let cfg = fixed_cfg(method, chosen.0, chosen.1, tol);
    let (_, rep) = invert_flow(f, z, cond, &cfg)?;
    Ok(GridSearch {
        method,
        per_sample: per_sample.into_iter().map(|(s, _)| s).collect(),
        batch_alpha: chosen.0,
        batch_n: chosen.1,
        batch_converged: rep.converged_count(),
        batch_micros: rep.micros,
    })
}

/// End-to-end reconstruction error after exactly `n` iterations per block,
/// for `n = 0..=max_iters`; one curve per sample.
pub fn error_curves(
    f: &EffectiveFlow,
    z: &Tensor2,
    cond: Option<&Tensor2>,
    method: Method,
    alpha: f64,
    max_iters: usize,
) -> Result<Vec<Vec<f64>>, InversionError> {
    (0..z.rows())
        .into_par_iter()
        .map(|r| {
            (0..=max_iters)
                .map(|n| {
                    let cfg = InversionConfig {
                        method,
                        alpha,
                        max_iters: n,
                        tol: f64::MIN_POSITIVE,
                        block_tol: None,
                        fixed_iters: true,
                    };
                    Ok(invert_sample(f, z.row(r), cond.map(|c| c.row(r)), &cfg)?.1.recon_error)
                })
                .collect()
        })
        .collect()
}

/// One CSV row per sample: `sample_id, method, alpha, N_used, recon_error, micros`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InversionRow {
    pub sample_id: usize,
    pub method: String,
    pub alpha: Option<f64>,
    #[serde(rename = "N_used")]
    pub n_used: Option<usize>,
    pub recon_error: f64,
    pub micros: u64,
}

impl InversionReport {
    /// Rows with `N_used` the largest per-block iteration count.
    pub fn rows(&self) -> Vec<InversionRow> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| InversionRow {
                sample_id: i,
                method: self.config.method.name().into(),
                alpha: match self.config.method {
                    Method::Newton => Some(self.config.alpha),
                    Method::Banach => None,
                },
                n_used: s.iterations.iter().copied().max(),
                recon_error: s.recon_error,
                micros: s.micros,
            })
            .collect()
    }
}

impl GridSearch {
    pub fn rows(&self) -> Vec<InversionRow> {
        self.per_sample
            .iter()
            .map(|s| InversionRow {
                sample_id: s.sample_id,
                method: self.method.name().into(),
                alpha: s.alpha,
                n_used: s.n,
                recon_error: s.recon_error,
                micros: s.micros,
            })
            .collect()
    }
}

pub fn write_rows<W: Write>(rows: &[InversionRow], out: W) -> Result<(), InversionError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FlowConfig, ResidualFlow};
    use crate::graph::parse_graph;

    fn flow(c: f64, seed: u64) -> ResidualFlow {
        let g = parse_graph("a; b; c; a -> b; a -> c; b -> c").unwrap();
        let cfg = FlowConfig {
            steps: 2,
            hidden_widths: vec![16],
            lip_bound: c,
            seed,
        };
        ResidualFlow::new(g, vec![], &cfg).unwrap()
    }

    #[test]
    fn constant_block_inverts_in_one_newton_step() {
        let mut f = flow(0.9, 1);
        f.zero_weights();
        for b in f.blocks_mut() {
            b.layers[1].bias.data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        }
        let eff = f.effective();
        let y = Tensor2::from_rows(&[[1.0, 1.0, 1.0]]);
        let cfg = InversionConfig::default();
        let (x, solves) = newton_invert_block(&eff.blocks[0], &y, None, &cfg).unwrap();
        assert_eq!(solves[0].iterations, 1);
        assert_eq!(x.row(0), &[0.5, 2.0, -1.0]);
        let (_, solves) = banach_invert_block(&eff.blocks[0], &y, None, &cfg).unwrap();
        assert_eq!(solves[0].iterations, 1);
    }

    #[test]
    fn identity_flow_returns_input() {
        let mut f = flow(0.9, 2);
        f.zero_weights();
        let z = Tensor2::from_rows(&[[0.3, -0.1, 4.0]]);
        let (x, rep) = invert_flow(&f.effective(), &z, None, &InversionConfig::default()).unwrap();
        assert_eq!(x, z);
        assert!(rep.samples[0].converged);
        assert_eq!(rep.samples[0].iterations, vec![0, 0]);
    }

    #[test]
    fn rejects_bad_alpha() {
        let f = flow(0.9, 3);
        let z = Tensor2::zeros(1, 3);
        let cfg = InversionConfig::newton(2.0, 10);
        assert!(invert_flow(&f.effective(), &z, None, &cfg).is_err());
    }

    #[test]
    fn better_prefers_fewer_iterations_then_unit_alpha() {
        assert!(better((0.5, 3), (1.0, 4)));
        assert!(better((1.0, 3), (0.9, 3)));
        assert!(better((0.9, 3), (1.1, 3)));
    }

    #[test]
    fn csv_header_matches_interface() {
        let f = flow(0.9, 4);
        let z = Tensor2::zeros(2, 3);
        let (_, rep) = invert_flow(&f.effective(), &z, None, &InversionConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_rows(&rep.rows(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sample_id,method,alpha,N_used,recon_error,micros\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
