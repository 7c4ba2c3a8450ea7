//! LipMish: `h(x) = (x / K) · tanh(ζ(ζ(β) · x))` with `ζ` the softplus.
//!
//! Writing `s = ζ(β)`, `h(x) = Mish(s·x) / (s·K)` so `h'(x) = Mish'(s·x) / K`
//! and the Lipschitz constant is `max Mish' / K` whatever `β` is. `K` is
//! the maximum slope of Mish, rounded up.

use crate::autodiff::{Activation, ActivationValues};

/// Maximum of `d/dx [x·tanh(softplus(x))]`, rounded up in the 8th digit.
pub const LIPMISH_SCALE: f64 = 1.088_498_2;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LipMish;

impl LipMish {
    /// `(tanh(softplus(u)), 1 - tanh(softplus(u)), sigmoid(u))` from a single exp.
    #[inline]
    fn core(u: f64) -> (f64, f64, f64) {
        let e = (-u.abs()).exp();
        if u >= 0.0 {
            let den = 1.0 + 2.0 * e + 2.0 * e * e;
            ((1.0 + 2.0 * e) / den, 2.0 * e * e / den, 1.0 / (1.0 + e))
        } else {
            let den = e * e + 2.0 * e + 2.0;
            ((e * e + 2.0 * e) / den, 2.0 / den, e / (1.0 + e))
        }
    }
}

impl LipMish {
    /// Evaluation with `s = ζ(β)` and `ds = ζ'(β)` precomputed.
    #[inline]
    fn eval_scaled(x: f64, s: f64, ds: f64) -> ActivationValues {
        let (t, one_minus_t, sig) = Self::core(s * x);
        let tp = one_minus_t * (1.0 + t);
        let k = 1.0 / LIPMISH_SCALE;
        // shared factor of the second-order terms
        let curv = tp * sig * (1.0 - sig - 2.0 * t * sig);
        let d_s = x * x * tp * sig;
        let d1_s = 2.0 * x * tp * sig + x * x * s * curv;
        ActivationValues {
            value: x * t * k,
            d1: (t + x * s * tp * sig) * k,
            d2: (2.0 * s * tp * sig + x * s * s * curv) * k,
            d_beta: d_s * k * ds,
            d1_beta: d1_s * k * ds,
        }
    }
}

impl Activation for LipMish {
    #[inline]
    fn eval(&self, x: f64, beta: f64) -> ActivationValues {
        Self::eval_scaled(x, softplus(beta), sigmoid(beta))
    }

    fn eval_slice(&self, xs: &[f64], beta: f64, out: &mut Vec<ActivationValues>) {
        let (s, ds) = (softplus(beta), sigmoid(beta));
        out.clear();
        out.extend(xs.iter().map(|&x| Self::eval_scaled(x, s, ds)));
    }
}
