//! Symmetric uniform quantization on a step-size grid.
//!
//! Signed tensors (weights) use integer levels `k ∈ [-2^(M-1), 2^(M-1)]` and
//! clipping value `c = 2^(M-1)·Δ`. Unsigned tensors (post-ReLU activations)
//! use `k ∈ [0, 2^M - 1]` and `c = (2^M - 1)·Δ`. Values are stored
//! dequantized, i.e. as `k·Δ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    delta: f64,
    bits: u8,
    signed: bool,
}

impl QuantParams {
    pub fn new(delta: f64, bits: u8, signed: bool) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step size must be positive and finite, got {delta}"
            )));
        }
        check_bits(bits)?;
        Ok(QuantParams {
            delta,
            bits,
            signed,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn signed(&self) -> bool {
        self.signed
    }

    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        QuantParams::new(delta, self.bits, self.signed)
    }

    /// Inclusive integer level bounds `(lo, hi)`.
    pub fn levels(&self) -> (f64, f64) {
        level_bounds(self.bits, self.signed)
    }

    pub fn quantize_value(&self, x: f64) -> f64 {
        let (lo, hi) = self.levels();
        (x / self.delta).round_ties_even().clamp(lo, hi) * self.delta
    }
}

pub(crate) fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "bitwidth must be in [{MIN_BITS}, {MAX_BITS}], got {bits}"
        )))
    }
}

pub(crate) fn level_bounds(bits: u8, signed: bool) -> (f64, f64) {
    if signed {
        let half = (1u32 << (bits - 1)) as f64;
        (-half, half)
    } else {
        (0.0, ((1u32 << bits) - 1) as f64)
    }
}

/// Number of steps between zero and the clipping value.
pub fn top_level(bits: u8, signed: bool) -> f64 {
    level_bounds(bits, signed).1
}

pub fn quantize(x: &Tensor, q: &QuantParams) -> Tensor {
    x.map(|v| q.quantize_value(v))
}

pub fn clipping_of(q: &QuantParams) -> f64 {
    top_level(q.bits, q.signed) * q.delta
}

pub fn params_from_clipping(c: f64, bits: u8, signed: bool) -> Result<QuantParams> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clipping value must be positive, got {c}"
        )));
    }
    check_bits(bits)?;
    QuantParams::new(c / top_level(bits, signed), bits, signed)
}

/// `Σ |Q(x) - x|^p`, the p-th power of the Lp quantization error.
pub fn lp_error_pow(x: &[f64], q: &QuantParams, p: f64) -> f64 {
    let mut acc = 0.0;
    if p == 2.0 {
        for &v in x {
            let e = q.quantize_value(v) - v;
            acc += e * e;
        }
    } else if p == 1.0 {
        for &v in x {
            acc += (q.quantize_value(v) - v).abs();
        }
    } else if p.fract() == 0.0 && p <= i32::MAX as f64 {
        let n = p as i32;
        for &v in x {
            acc += (q.quantize_value(v) - v).abs().powi(n);
        }
    } else {
        for &v in x {
            acc += (q.quantize_value(v) - v).abs().powf(p);
        }
    }
    acc
}

/// `e_p(Δ) = (Σ |Q(x) - x|^p)^(1/p)`.
pub fn lp_error(x: &Tensor, q: &QuantParams, p: f64) -> Result<f64> {
    check_p(p)?;
    Ok(lp_error_pow(x.data(), q, p).powf(1.0 / p))
}

pub(crate) fn check_p(p: f64) -> Result<()> {
    if p.is_finite() && p > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("norm exponent must be > 0, got {p}")))
    }
}
