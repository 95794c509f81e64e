//! Per-channel bias correction of quantized weights.
//!
//! Quantization shifts the mean (and spread) of each output channel. The
//! correction adds back the per-channel mean difference and, optionally,
//! rescales the channel to the full-precision standard deviation. Corrected
//! weights are no longer on the quantization grid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output channels live on this axis for both dense `[out, in]` and conv
/// `[F, C, kh, kw]` weights.
pub const CHANNEL_AXIS: usize = 0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasCorrection {
    #[default]
    None,
    Mean,
    MeanVar,
}

impl fmt::Display for BiasCorrection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BiasCorrection::None => "none",
            BiasCorrection::Mean => "mean",
            BiasCorrection::MeanVar => "mean-var",
        })
    }
}

impl FromStr for BiasCorrection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BiasCorrection::None),
            "mean" => Ok(BiasCorrection::Mean),
            "mean-var" => Ok(BiasCorrection::MeanVar),
            other => Err(Error::InvalidArgument(format!(
                "unknown bias correction '{other}' (expected none, mean or mean-var)"
            ))),
        }
    }
}

struct Channels {
    outer: usize,
    count: usize,
    inner: usize,
}

impl Channels {
    fn of(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "channel axis {axis} out of range for shape {shape:?}"
            )));
        }
        Ok(Channels {
            outer: shape[..axis].iter().product(),
            count: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    fn len(&self) -> usize {
        self.outer * self.inner
    }

    /// Flat indices of channel `c`, in ascending order.
    fn indices(&self, c: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.outer).flat_map(move |o| {
            let base = (o * self.count + c) * self.inner;
            base..base + self.inner
        })
    }

    fn mean(&self, data: &[f64], c: usize) -> f64 {
        self.indices(c).fold(0.0, |acc, i| acc + data[i]) / self.len() as f64
    }

    fn std(&self, data: &[f64], c: usize) -> f64 {
        let m = self.mean(data, c);
        let var = self
            .indices(c)
            .fold(0.0, |acc, i| acc + (data[i] - m) * (data[i] - m))
            / self.len() as f64;
        var.sqrt()
    }
}

/// Corrects `wq` channel by channel so that its statistics match `w`.
pub fn bias_correct(w: &Tensor, wq: &Tensor, axis: usize, mode: BiasCorrection) -> Result<Tensor> {
    if w.shape() != wq.shape() {
        return Err(Error::Shape(format!(
            "bias correction of {:?} against {:?}",
            wq.shape(),
            w.shape()
        )));
    }
    let ch = Channels::of(w.shape(), axis)?;
    let mut out = wq.data().to_vec();
    if mode == BiasCorrection::None {
        return Ok(Tensor::from_parts(w.shape().to_vec(), out));
    }
    for c in 0..ch.count {
        let shift = ch.mean(w.data(), c) - ch.mean(&out, c);
        for i in ch.indices(c).collect::<Vec<_>>() {
            out[i] += shift;
        }
        if mode == BiasCorrection::MeanVar {
            let sq = ch.std(&out, c);
            if sq > 0.0 {
                let scale = ch.std(w.data(), c) / sq;
                let m = ch.mean(&out, c);
                for i in ch.indices(c).collect::<Vec<_>>() {
                    out[i] = m + (out[i] - m) * scale;
                }
            }
        }
    }
    Ok(Tensor::from_parts(w.shape().to_vec(), out))
}
