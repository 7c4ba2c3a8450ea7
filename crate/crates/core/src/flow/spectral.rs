//! Spectral normalization by power iteration.
//!
//! The persistent state is the left vector `u`. One estimate computes
//! `v = normalize(Wᵀu)`, `u' = normalize(W v)` and `σ̂ = u'ᵀ W v`; a power
//! iteration step replaces `u` by `u'`.

use crate::tensor::{dot, norm2, Tensor2};

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEstimate {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl SpectralEstimate {
    /// `u vᵀ`, the gradient of `σ̂` with respect to the matrix.
    pub fn outer(&self) -> Tensor2 {
        let mut t = Tensor2::zeros(self.u.len(), self.v.len());
        for (i, &ui) in self.u.iter().enumerate() {
            for (o, &vj) in t.row_mut(i).iter_mut().zip(&self.v) {
                *o = ui * vj;
            }
        }
        t
    }
}

fn mat_vec(w: &Tensor2, v: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| dot(w.row(r), v)).collect()
}

fn mat_t_vec(w: &Tensor2, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (r, &ur) in u.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(w.row(r)) {
            *o += ur * x;
        }
    }
    out
}

fn normalized(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = norm2(&v);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

/// One power-iteration estimate from state `u`. `None` for a zero matrix.
pub fn estimate(w: &Tensor2, u: &[f64]) -> Option<SpectralEstimate> {
    let v = match normalized(mat_t_vec(w, u)) {
        Some(v) => v,
        None => {
            // u orthogonal to the column space; restart from the heaviest row
            let r = (0..w.rows()).max_by(|&a, &b| norm2(w.row(a)).total_cmp(&norm2(w.row(b))))?;
            normalized(w.row(r).to_vec())?
        }
    };
    let u_next = normalized(mat_vec(w, &v))?;
    let mut est = SpectralEstimate {
        sigma: 0.0,
        u: u_next,
        v,
    };
    est.sigma = w.hadamard(&est.outer()).expect("outer matches shape").sum();
    Some(est)
}

/// Advances `u` by `iters` power-iteration steps.
pub fn power_iterate(w: &Tensor2, u: &mut Vec<f64>, iters: usize) {
    for _ in 0..iters {
        match estimate(w, u) {
            Some(e) => *u = e.u,
            None => return,
        }
    }
}

/// Fixed dense unit vector mixed into the state before a refresh.
fn probe(n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.618_033_988_749_895).fract() - 0.5).collect();
    normalized(v).unwrap_or_else(|| vec![1.0; n])
}

/// Iterates until the estimate stops moving (relative change below 1e-14),
/// with at least `min_iters` and at most `max_iters` steps.
///
/// The state is first mixed with a small dense vector. Long runs of power
/// iteration on block-structured masked matrices drive some components of
/// `u` to underflow; after a weight update the leading singular vector can
/// live exactly there, and plain iteration would never find it again.
pub fn refresh(w: &Tensor2, u: &mut Vec<f64>, min_iters: usize, max_iters: usize) {
    let p = probe(u.len());
    let mixed: Vec<f64> = u.iter().zip(&p).map(|(a, b)| a + 1e-3 * b).collect();
    if let Some(m) = normalized(mixed) {
        *u = m;
    }
    let mut last = f64::NAN;
    for i in 0..max_iters {
        let Some(e) = estimate(w, u) else { return };
        *u = e.u;
        if i >= min_iters && (e.sigma - last).abs() <= 1e-14 * e.sigma {
            return;
        }
        last = e.sigma;
    }
}

/// `(W ∘ M) · min(1, c / σ̂)`, advancing `u` by `iters` steps first.
pub fn spectral_normalize(
    w: &Tensor2,
    mask: &Tensor2,
    c: f64,
    u: &mut Vec<f64>,
    iters: usize,
) -> Tensor2 {
    let wm = w.hadamard(mask).expect("mask matches weight shape");
    power_iterate(&wm, u, iters);
    scale_to_bound(wm, u, c)
}

/// Applies the bound using the estimate from the current state.
pub(crate) fn scale_to_bound(wm: Tensor2, u: &[f64], c: f64) -> Tensor2 {
    match estimate(&wm, u) {
        Some(e) if e.sigma > c => {
            let factor = c * (1.0 / e.sigma);
            wm.scale(factor)
        }
        _ => wm,
    }
}
