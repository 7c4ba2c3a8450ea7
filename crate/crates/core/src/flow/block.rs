use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::lipmish::LipMish;
use super::spectral::{self, SpectralEstimate};
use super::FlowError;
use crate::autodiff::{Activation, Tape, Var};
use crate::graph::DagGraph;
use crate::masks::{self, MaskSet};
use crate::tensor::Tensor2;

/// Initial β; softplus(0.5) ≈ 0.974.
pub const INITIAL_BETA: f64 = 0.5;

/// Minimum power-iteration steps of a refresh.
pub const REFRESH_MIN_ITERS: usize = 50;
const REFRESH_MAX_ITERS: usize = 2000;

/// One masked linear map `out x in` with its power-iteration state.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLayer {
    pub weight: Tensor2,
    pub bias: Tensor2,
    pub mask: Tensor2,
    pub u: Vec<f64>,
}

impl MaskedLayer {
    pub fn masked_weight(&self) -> Tensor2 {
        self.weight.hadamard(&self.mask).expect("mask shape")
    }

    pub fn estimate(&self) -> Option<SpectralEstimate> {
        spectral::estimate(&self.masked_weight(), &self.u)
    }

    pub fn effective_weight(&self, c: f64) -> Tensor2 {
        spectral::scale_to_bound(self.masked_weight(), &self.u, c)
    }
}

/// Residual block `x ↦ x + g(x ⊕ cond)` where `g` is a masked MLP whose
/// layers are spectrally normalized to `lip_bound`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub(crate) layers: Vec<MaskedLayer>,
    pub(crate) beta: f64,
    pub(crate) lip_bound: f64,
    pub(crate) dim: usize,
    pub(crate) cond_dim: usize,
    pub(crate) hidden_widths: Vec<usize>,
    pub(crate) mask_seed: u64,
}

/// Taped handles of one block's parameters.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub beta: Var,
    masks: Vec<Var>,
}

impl ResidualBlock {
    pub(crate) fn masks_for(
        graph: &DagGraph,
        cond_dim: usize,
        hidden_widths: &[usize],
        mask_seed: u64,
    ) -> Result<MaskSet, FlowError> {
        let labels =
            masks::assign_labels_conditional(graph, cond_dim, hidden_widths, mask_seed)?;
        Ok(masks::conditional_masks(graph, cond_dim, labels))
    }

    /// Fresh block: weights `U(±1/√fan_in)` restricted to the mask, zero
    /// biases, `β = 0.5`, converged power-iteration state.
    pub fn new(
        graph: &DagGraph,
        cond_dim: usize,
        hidden_widths: &[usize],
        lip_bound: f64,
        mask_seed: u64,
        init_seed: u64,
    ) -> Result<Self, FlowError> {
        if !(lip_bound > 0.0 && lip_bound < 1.0) {
            return Err(FlowError::InvalidConfig(format!(
                "Lipschitz bound must lie in (0, 1), got {lip_bound}"
            )));
        }
        let mask_set = Self::masks_for(graph, cond_dim, hidden_widths, mask_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let layers = mask_set
            .masks
            .into_iter()
            .map(|mask| {
                let (out, fan_in) = mask.shape();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut weight = Tensor2::zeros(out, fan_in);
                for (w, &m) in weight.data_mut().iter_mut().zip(mask.data()) {
                    let draw: f64 = rng.random_range(-bound..bound);
                    *w = draw * m;
                }
                let u: Vec<f64> = (0..out).map(|_| rng.sample(StandardNormal)).collect();
                MaskedLayer {
                    weight,
                    bias: Tensor2::zeros(1, out),
                    mask,
                    u,
                }
            })
            .collect();
        let mut block = Self {
            layers,
            beta: INITIAL_BETA,
            lip_bound,
            dim: graph.len(),
            cond_dim,
            hidden_widths: hidden_widths.to_vec(),
            mask_seed,
        };
        block.refresh_spectral_state();
        Ok(block)
    }

    pub fn layers(&self) -> &[MaskedLayer] {
        &self.layers
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn lip_bound(&self) -> f64 {
        self.lip_bound
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.hidden_widths
    }

    pub fn mask_seed(&self) -> u64 {
        self.mask_seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    /// Unmasked weights, biases and β.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.mask.data().iter().filter(|&&m| m != 0.0).count() + l.bias.cols())
            .sum::<usize>()
            + 1
    }

    pub fn advance_power_iteration(&mut self) {
        for l in &mut self.layers {
            let wm = l.masked_weight();
            spectral::power_iterate(&wm, &mut l.u, 1);
        }
    }

    pub fn refresh_spectral_state(&mut self) {
        for l in &mut self.layers {
            let wm = l.masked_weight();
            spectral::refresh(&wm, &mut l.u, REFRESH_MIN_ITERS, REFRESH_MAX_ITERS);
        }
    }

    /// Parameter slices in a fixed order: per layer weight then bias, then β.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &mut self.layers {
            out.push(l.weight.data_mut());
            out.push(l.bias.data_mut());
        }
        out.push(std::slice::from_mut(&mut self.beta));
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &self.layers {
            out.push(l.weight.data());
            out.push(l.bias.data());
        }
        out.push(std::slice::from_ref(&self.beta));
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BlockVars {
        let leaf = |tape: &mut Tape, t: Tensor2| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut masks = Vec::new();
        for l in &self.layers {
            weights.push(leaf(tape, l.weight.clone()));
            biases.push(leaf(tape, l.bias.clone()));
            masks.push(tape.constant(l.mask.clone()));
        }
        let beta = leaf(tape, Tensor2::scalar(self.beta));
        BlockVars {
            weights,
            biases,
            beta,
            masks,
        }
    }

    /// Gradient slices aligned with [`Self::params_mut`].
    pub fn collect_grads(
        &self,
        tape: &Tape,
        grads: &crate::autodiff::Gradients,
        vars: &BlockVars,
    ) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for (w, b) in vars.weights.iter().zip(&vars.biases) {
            out.push(grads.wrt(tape, *w).into_vec());
            out.push(grads.wrt(tape, *b).into_vec());
        }
        out.push(grads.wrt(tape, vars.beta).into_vec());
        out
    }

    /// Effective weights on the tape, scaled when the estimate exceeds the bound.
    fn tape_effective(&self, tape: &mut Tape, vars: &BlockVars) -> Result<Vec<Var>, FlowError> {
        let mut eff = Vec::with_capacity(self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            let wm = tape.mul(vars.weights[k], vars.masks[k])?;
            let est = spectral::estimate(tape.value(wm), &l.u);
            match est {
                Some(e) if e.sigma > self.lip_bound => {
                    let outer = tape.constant(e.outer());
                    let prod = tape.mul(wm, outer)?;
                    let sigma = tape.sum(prod);
                    let inv = tape.recip(sigma);
                    let factor = tape.scale(inv, self.lip_bound);
                    eff.push(tape.mul_scalar(wm, factor)?);
                }
                _ => eff.push(wm),
            }
        }
        Ok(eff)
    }

    /// Taped forward pass; returns `(y, log|det J|)` with the log-det as a
    /// `batch x 1` column.
    pub fn tape_forward(
        &self,
        tape: &mut Tape,
        vars: &BlockVars,
        x: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var), FlowError> {
        self.check_input(tape.value(x), cond.map(|c| tape.value(c)))?;
        let eff = self.tape_effective(tape, vars)?;
        let input = match cond {
            Some(c) => tape.concat(&[x, c])?,
            None => x,
        };
        let n = eff.len();
        let mut h = input;
        let mut derivs = Vec::with_capacity(n - 1);
        for k in 0..n - 1 {
            let a = tape.matmul_t(h, eff[k])?;
            let a = tape.add_row(a, vars.biases[k])?;
            let (hv, hd) = tape.activate(a, vars.beta, &LipMish)?;
            h = hv;
            derivs.push(hd);
        }
        let out = tape.matmul_t(h, eff[n - 1])?;
        let out = tape.add_row(out, vars.biases[n - 1])?;
        let y = tape.add(x, out)?;

        let dg = if n == 2 {
            let first = tape.slice_cols(eff[0], 0, self.dim)?;
            let last_t = tape.transpose(eff[1]);
            let q = tape.mul(first, last_t)?;
            tape.matmul(derivs[0], q)?
        } else {
            let mut cols = Vec::with_capacity(self.dim);
            for j in 0..self.dim {
                let col = tape.slice_cols(eff[0], j, j + 1)?;
                let row = tape.transpose(col);
                let mut t = tape.mul_row(derivs[0], row)?;
                for k in 1..n - 1 {
                    let p = tape.matmul_t(t, eff[k])?;
                    t = tape.mul(derivs[k], p)?;
                }
                let last = tape.slice_rows(eff[n - 1], j, j + 1)?;
                cols.push(tape.matmul_t(t, last)?);
            }
            tape.concat(&cols)?
        };
        let diag = tape.add_const(dg, 1.0);
        let logdiag = tape.log(diag)?;
        Ok((y, tape.row_sum(logdiag)))
    }

    fn check_input(&self, x: &Tensor2, cond: Option<&Tensor2>) -> Result<(), FlowError> {
        if x.cols() != self.dim {
            return Err(FlowError::Shape(format!(
                "input has {} columns, block expects {}",
                x.cols(),
                self.dim
            )));
        }
        match (cond, self.cond_dim) {
            (None, 0) => Ok(()),
            (Some(c), d) if c.cols() == d && c.rows() == x.rows() => Ok(()),
            (Some(c), d) => Err(FlowError::Shape(format!(
                "conditioning is {}x{}, block expects {}x{}",
                c.rows(),
                c.cols(),
                x.rows(),
                d
            ))),
            (None, d) => Err(FlowError::Shape(format!(
                "block expects {d} conditioning columns"
            ))),
        }
    }

    /// Frozen copy of the block with effective weights precomputed.
    pub fn effective(&self) -> EffectiveBlock {
        let weights: Vec<Tensor2> = self
            .layers
            .iter()
            .map(|l| l.effective_weight(self.lip_bound))
            .collect();
        let biases = self.layers.iter().map(|l| l.bias.clone()).collect();
        let diag_factor = if weights.len() == 2 {
            let first = weights[0].slice_cols(0, self.dim).expect("dim within input");
            Some(first.hadamard(&weights[1].transpose()).expect("shapes"))
        } else {
            None
        };
        EffectiveBlock {
            weights,
            biases,
            beta: self.beta,
            dim: self.dim,
            cond_dim: self.cond_dim,
            diag_factor,
        }
    }
}

/// Block with fixed effective weights, for evaluation and inversion.
#[derive(Debug, Clone)]
pub struct EffectiveBlock {
    pub weights: Vec<Tensor2>,
    pub biases: Vec<Tensor2>,
    pub beta: f64,
    pub dim: usize,
    pub cond_dim: usize,
    diag_factor: Option<Tensor2>,
}

/// Output of [`EffectiveBlock::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    pub y: Tensor2,
    /// Diagonal of `I + J_g`, one row per sample.
    pub diag: Tensor2,
}

fn activate(a: &Tensor2, beta: f64) -> (Tensor2, Tensor2) {
    let mut h = Tensor2::zeros(a.rows(), a.cols());
    let mut d = Tensor2::zeros(a.rows(), a.cols());
    let mut evals = Vec::with_capacity(a.data().len());
    LipMish.eval_slice(a.data(), beta, &mut evals);
    for ((e, hv), dv) in evals.iter().zip(h.data_mut()).zip(d.data_mut()) {
        *hv = e.value;
        *dv = e.d1;
    }
    (h, d)
}

impl EffectiveBlock {
    fn hidden(&self, x: &Tensor2, cond: Option<&Tensor2>) -> Result<(Tensor2, Vec<Tensor2>), FlowError> {
        if x.cols() != self.dim || cond.map_or(0, Tensor2::cols) != self.cond_dim {
            return Err(FlowError::Shape(format!(
                "input {}x{} / conditioning {:?} do not match block ({} + {})",
                x.rows(),
                x.cols(),
                cond.map(Tensor2::shape),
                self.dim,
                self.cond_dim
            )));
        }
        let input = match cond {
            Some(c) => Tensor2::hcat(&[x, c])?,
            None => x.clone(),
        };
        let n = self.weights.len();
        let mut h = input;
        let mut derivs = Vec::with_capacity(n - 1);
        for k in 0..n - 1 {
            let a = h.matmul_t(&self.weights[k])?.add_row(&self.biases[k])?;
            let (hv, hd) = activate(&a, self.beta);
            h = hv;
            derivs.push(hd);
        }
        Ok((h, derivs))
    }

    /// `g(x ⊕ cond)`.
    pub fn residual(&self, x: &Tensor2, cond: Option<&Tensor2>) -> Result<Tensor2, FlowError> {
        let (h, _) = self.hidden(x, cond)?;
        let n = self.weights.len();
        Ok(h.matmul_t(&self.weights[n - 1])?.add_row(&self.biases[n - 1])?)
    }

    /// `y = x + g(x ⊕ cond)` and the diagonal of its Jacobian.
    pub fn forward(&self, x: &Tensor2, cond: Option<&Tensor2>) -> Result<BlockOutput, FlowError> {
        let (h, derivs) = self.hidden(x, cond)?;
        let n = self.weights.len();
        let out = h.matmul_t(&self.weights[n - 1])?.add_row(&self.biases[n - 1])?;
        let y = x.add(&out)?;
        let dg = match &self.diag_factor {
            Some(q) => derivs[0].matmul(q)?,
            None => {
                let mut cols = Vec::with_capacity(self.dim);
                for j in 0..self.dim {
                    let row = self.weights[0].slice_cols(j, j + 1)?.transpose();
                    let mut t = derivs[0].mul_row(&row)?;
                    for k in 1..n - 1 {
                        t = derivs[k].hadamard(&t.matmul_t(&self.weights[k])?)?;
                    }
                    let last = self.weights[n - 1].slice_rows(j, j + 1)?;
                    cols.push(t.matmul_t(&last)?);
                }
                let refs: Vec<&Tensor2> = cols.iter().collect();
                Tensor2::hcat(&refs)?
            }
        };
        Ok(BlockOutput {
            y,
            diag: dg.map(|v| v + 1.0),
        })
    }

    /// Dense Jacobian of `y` with respect to `x` for a single sample.
    pub fn jacobian(&self, x: &[f64], cond: Option<&[f64]>) -> Result<Tensor2, FlowError> {
        let xt = Tensor2::row_vector(x);
        let ct = cond.map(Tensor2::row_vector);
        let (_, derivs) = self.hidden(&xt, ct.as_ref())?;
        // J = W_L diag(h'_{L-1}) ... diag(h'_1) W_1[:, :D]
        let mut acc = self.weights[0].slice_cols(0, self.dim)?;
        for (k, d) in derivs.iter().enumerate() {
            for r in 0..acc.rows() {
                let s = d.get(0, r);
                acc.row_mut(r).iter_mut().for_each(|v| *v *= s);
            }
            acc = self.weights[k + 1].matmul(&acc)?;
        }
        Ok(Tensor2::identity(self.dim).add(&acc)?)
    }
}
