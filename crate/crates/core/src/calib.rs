//! Layer-wise calibration: for each tensor independently, the step size that
//! minimizes the Lp norm of its quantization error.
//!
//! The search scans log-spaced candidates over `(Δ_hi/10³, Δ_hi]`, where
//! `Δ_hi` puts the tensor's largest magnitude on the top grid level, then
//! refines around the best few local minima of the scan. The error is
//! piecewise smooth with many shallow local minima, which a pure bracketing
//! search would get stuck in. Small tensors have the most rugged error
//! curves and are also the cheapest to evaluate, so the scan gets denser as
//! the tensor gets smaller (128 candidates at least, 1024 at most).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CalibSet, QuantizedModel};
use crate::quantizer::{check_bits, check_p, lp_error_pow, top_level, QuantParams};
use crate::search::golden_section;
use crate::steps::{SlotKind, StepVector};
use crate::tensor::Tensor;

/// Fewest candidates in the coarse scan.
pub const SCAN_POINTS: usize = 128;
pub const MAX_SCAN_POINTS: usize = 1024;
/// Element evaluations the coarse scan may spend before thinning out.
pub const SCAN_BUDGET: usize = 1 << 22;
/// Scan minima refined.
pub const REFINE_CANDIDATES: usize = 3;
/// Points of the linear sub-scan inside each refined bracket.
pub const REFINE_POINTS: usize = 16;
/// Lower end of the scan as a fraction of `Δ_hi`.
pub const SCAN_SPAN: f64 = 1e-3;
pub const REFINE_TOL: f64 = 1e-5;

pub const DEFAULT_P_GRID: [f64; 6] = [2.0, 2.4, 2.8, 3.2, 3.6, 4.0];

/// A point on the Lp trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PNormSample {
    pub p: f64,
    pub delta: StepVector,
    pub loss: f64,
}

/// Largest step worth considering: the one mapping the largest magnitude in
/// `x` onto the top quantization level.
pub fn max_step(x: &Tensor, bits: u8, signed: bool) -> Result<f64> {
    let mag = if signed { x.max_abs() } else { x.max().max(0.0) };
    if !(mag > 0.0) {
        return Err(Error::Degenerate(format!(
            "tensor of shape {:?} has no {} range to calibrate",
            x.shape(),
            if signed { "non-zero" } else { "positive" }
        )));
    }
    Ok(mag / top_level(bits, signed))
}

/// Number of scan candidates for a tensor of `len` elements.
pub fn scan_points(len: usize) -> usize {
    (SCAN_BUDGET / len.max(1)).clamp(SCAN_POINTS, MAX_SCAN_POINTS)
}

/// `points` candidate steps, log-spaced and ascending, ending exactly at `hi`.
pub fn scan_candidates(hi: f64, points: usize) -> Vec<f64> {
    (1..=points)
        .map(|k| {
            if k == points {
                hi
            } else {
                hi * SCAN_SPAN.powf(1.0 - k as f64 / points as f64)
            }
        })
        .collect()
}

/// Step size minimizing `e_p(Δ)` for one tensor.
pub fn calibrate_tensor(x: &Tensor, bits: u8, signed: bool, p: f64) -> Result<QuantParams> {
    check_bits(bits)?;
    check_p(p)?;
    let hi = max_step(x, bits, signed)?;
    let err = |delta: f64| -> f64 {
        let q = QuantParams::new(delta, bits, signed).expect("positive candidate");
        lp_error_pow(x.data(), &q, p)
    };
    let cands = scan_candidates(hi, scan_points(x.len()));
    let errs: Vec<f64> = cands.iter().map(|&d| err(d)).collect();
    let n = cands.len();
    // local minima of the scan, best first, ties to the smaller step
    let mut minima: Vec<usize> = (0..n)
        .filter(|&i| (i == 0 || errs[i] <= errs[i - 1]) && (i + 1 == n || errs[i] <= errs[i + 1]))
        .collect();
    minima.sort_by(|&a, &b| errs[a].total_cmp(&errs[b]).then(a.cmp(&b)));
    minima.truncate(REFINE_CANDIDATES);

    let mut best = (errs[minima[0]], cands[minima[0]]);
    for &m in &minima {
        let lo = if m == 0 { hi * SCAN_SPAN } else { cands[m - 1] };
        let up = cands.get(m + 1).copied().unwrap_or(hi);
        let sub: Vec<f64> = (0..=REFINE_POINTS)
            .map(|i| lo + (up - lo) * i as f64 / REFINE_POINTS as f64)
            .collect();
        let sub_errs: Vec<f64> = sub.iter().map(|&d| err(d)).collect();
        let j = (0..sub.len())
            .min_by(|&a, &b| sub_errs[a].total_cmp(&sub_errs[b]).then(a.cmp(&b)))
            .expect("non-empty sub-scan");
        if sub_errs[j] < best.0 && sub[j] > 0.0 {
            best = (sub_errs[j], sub[j]);
        }
        let (a, b) = (sub[j.saturating_sub(1)], sub[(j + 1).min(REFINE_POINTS)]);
        let refined = golden_section(err, a, b, REFINE_TOL * 0.5 * (a + b));
        if refined.fx < best.0 && refined.x > 0.0 {
            best = (refined.fx, refined.x);
        }
    }
    QuantParams::new(best.1, bits, signed)
}

/// Caches the tensors a model's layout quantizes, so the Lp trajectory can be
/// computed for many `p` from a single forward pass.
pub struct LayerwiseCalibrator<'a> {
    model: &'a QuantizedModel,
    tensors: Vec<Tensor>,
}

impl<'a> LayerwiseCalibrator<'a> {
    pub fn new(model: &'a QuantizedModel, calib: &CalibSet) -> Result<Self> {
        let layout = model.layout();
        let mut acts = if layout.activation_indices().is_empty() {
            Vec::new()
        } else {
            model.fp_activations(calib.inputs())?
        }
        .into_iter();
        let mut tensors = Vec::with_capacity(layout.len());
        for slot in layout.slots() {
            tensors.push(match slot.kind {
                SlotKind::Weight => model.model().layers()[slot.layer]
                    .weights
                    .clone()
                    .expect("weight slot on weighted layer"),
                SlotKind::Activation => acts.next().expect("one tap per activation slot"),
            });
        }
        Ok(LayerwiseCalibrator { model, tensors })
    }

    /// The tensor quantized by each slot, in layout order.
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn calibrate(&self, p: f64) -> Result<StepVector> {
        check_p(p)?;
        let slots = self.model.layout().slots();
        let steps = slots
            .par_iter()
            .zip(self.tensors.par_iter())
            .map(|(slot, t)| {
                calibrate_tensor(t, slot.bits, slot.signed(), p)
                    .map(|q| q.delta())
                    .map_err(|e| match e {
                        Error::Degenerate(msg) => Error::Degenerate(format!(
                            "layer {} {:?}: {msg}",
                            slot.layer, slot.kind
                        )),
                        other => other,
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StepVector::new(steps))
    }
}

/// Layer-wise calibration of every quantized tensor in the model at norm `p`.
pub fn calibrate_model(model: &QuantizedModel, calib: &CalibSet, p: f64) -> Result<StepVector> {
    LayerwiseCalibrator::new(model, calib)?.calibrate(p)
}
