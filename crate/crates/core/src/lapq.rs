//! The full pipeline: layer-wise Lp calibration over a grid of `p`, a
//! quadratic fit of the loss along that trajectory to choose the starting
//! point, and Powell's method on the calibration loss.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::calib::{LayerwiseCalibrator, PNormSample, DEFAULT_P_GRID};
use crate::error::{Error, Result};
use crate::graph::{CalibSet, QuantizedModel};
use crate::powell::{powell, PowellConfig};
use crate::steps::StepVector;

/// Least-squares parabola `f(p) = a·p² + b·p + c` through `(p, loss)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub p_star: f64,
    pub samples: Vec<(f64, f64)>,
}

impl QuadFit {
    /// Fits the parabola and locates its minimizer. A fit that does not open
    /// upward falls back to the best sample; otherwise the vertex is clamped
    /// to the sampled range.
    pub fn fit(samples: &[(f64, f64)]) -> Result<QuadFit> {
        let mut distinct: Vec<f64> = samples.iter().map(|s| s.0).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "quadratic fit needs at least 3 distinct p values, got {}",
                distinct.len()
            )));
        }
        if samples.iter().any(|s| !s.0.is_finite() || !s.1.is_finite()) {
            return Err(Error::NonFiniteLoss("non-finite sample in quadratic fit".into()));
        }
        // centred abscissa keeps the normal equations well conditioned
        let n = samples.len() as f64;
        let mean = samples.iter().fold(0.0, |acc, s| acc + s.0) / n;
        let mut m = [[0.0f64; 4]; 3];
        for &(p, y) in samples {
            let q = p - mean;
            let basis = [q * q, q, 1.0];
            for r in 0..3 {
                for c in 0..3 {
                    m[r][c] += basis[r] * basis[c];
                }
                m[r][3] += basis[r] * y;
            }
        }
        let [qa, qb, qc] = solve3(m).ok_or_else(|| {
            Error::InvalidArgument("degenerate sample set for quadratic fit".into())
        })?;
        let (lo, hi) = (distinct[0], distinct[distinct.len() - 1]);
        let p_star = if qa > 0.0 {
            (mean - qb / (2.0 * qa)).clamp(lo, hi)
        } else {
            samples
                .iter()
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .map(|s| s.0)
                .expect("non-empty")
        };
        Ok(QuadFit {
            a: qa,
            b: qb - 2.0 * qa * mean,
            c: qc - qb * mean + qa * mean * mean,
            p_star,
            samples: samples.to_vec(),
        })
    }

    pub fn eval(&self, p: f64) -> f64 {
        (self.a * p + self.b) * p + self.c
    }
}

/// Gaussian elimination with partial pivoting on an augmented 3×4 system.
fn solve3(mut m: [[f64; 4]; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col] == 0.0 {
            return None;
        }
        m.swap(col, piv);
        for r in col + 1..3 {
            let f = m[r][col] / m[col][col];
            if f != 0.0 {
                for c in col..4 {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let mut acc = m[r][3];
        for c in r + 1..3 {
            acc -= m[r][c] * x[c];
        }
        x[r] = acc / m[r][r];
    }
    Some(x)
}

/// Outcome of choosing the starting point on the Lp trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadApprox {
    pub fit: QuadFit,
    /// `p` of the returned point (the fitted `p*` unless a sample beat it).
    pub p: f64,
    pub delta: StepVector,
    pub loss: f64,
}

/// Fits `loss(p)`, calibrates at the fitted `p*` and returns whichever of
/// that point and the samples has the lowest loss.
pub fn quad_approx(
    samples: &[PNormSample],
    mut calibrate: impl FnMut(f64) -> Result<StepVector>,
    mut evaluate: impl FnMut(&StepVector) -> Result<f64>,
) -> Result<QuadApprox> {
    let pairs: Vec<(f64, f64)> = samples.iter().map(|s| (s.p, s.loss)).collect();
    let fit = QuadFit::fit(&pairs)?;
    let mut candidates: Vec<(f64, StepVector, f64)> = samples
        .iter()
        .map(|s| (s.p, s.delta.clone(), s.loss))
        .collect();
    if !samples.iter().any(|s| s.p == fit.p_star) {
        let delta = calibrate(fit.p_star)?;
        let loss = evaluate(&delta)?;
        candidates.insert(0, (fit.p_star, delta, loss));
    }
    // first minimum wins: the fitted point, then samples in given order
    let (p, delta, loss) = candidates
        .into_iter()
        .reduce(|best, c| if c.2 < best.2 { c } else { best })
        .expect("at least three samples");
    Ok(QuadApprox { fit, p, delta, loss })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Layer-wise calibration at a single `p`.
    Lw,
    /// Layer-wise trajectory and quadratic approximation, no joint search.
    Qa,
    /// The full pipeline.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapqConfig {
    pub p_grid: Vec<f64>,
    pub phase: Phase,
    /// Norm used when `phase` is `Lw`.
    pub lw_p: f64,
    pub powell: PowellConfig,
}

impl Default for LapqConfig {
    fn default() -> Self {
        LapqConfig {
            p_grid: DEFAULT_P_GRID.to_vec(),
            phase: Phase::Full,
            lw_p: 2.0,
            powell: PowellConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub layerwise_s: f64,
    pub quadratic_s: f64,
    pub joint_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapqResult {
    pub delta_star: StepVector,
    pub final_loss: f64,
    pub p_samples: Vec<PNormSample>,
    pub quad: Option<QuadFit>,
    /// `p` of the joint optimizer's starting point.
    pub p_star: Option<f64>,
    /// Loss at the joint optimizer's starting point.
    pub init_loss: f64,
    /// Non-increasing best loss: the starting point, then one entry per
    /// Powell outer iteration.
    pub loss_trace: Vec<f64>,
    pub powell_iterations: usize,
    pub loss_evaluations: usize,
    /// Wall-clock time per phase; absent when not measured or stripped for
    /// reproducible output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<PhaseTimings>,
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Calibration loss as Powell sees it: non-positive steps are infeasible.
struct LossObjective<'a> {
    model: &'a QuantizedModel,
    calib: &'a CalibSet,
    error: Option<Error>,
    evaluations: usize,
}

impl LossObjective<'_> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evaluations += 1;
        if x.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return f64::INFINITY;
        }
        match self.model.loss(self.calib, &StepVector::new(x.to_vec())) {
            Ok(l) => l,
            Err(e) => {
                self.error.get_or_insert(e);
                f64::INFINITY
            }
        }
    }
}

pub fn lapq(model: &QuantizedModel, calib: &CalibSet, cfg: &LapqConfig) -> Result<LapqResult> {
    let mut obj = LossObjective {
        model,
        calib,
        error: None,
        evaluations: 0,
    };
    let mut eval = |steps: &StepVector| -> Result<f64> {
        obj.evaluations += 1;
        let l = model.loss(calib, steps)?;
        if l.is_finite() {
            Ok(l)
        } else {
            Err(Error::NonFiniteLoss(format!("loss {l} at the layer-wise point")))
        }
    };

    if model.dim() == 0 {
        let loss = eval(&StepVector::default())?;
        return Ok(LapqResult {
            delta_star: StepVector::default(),
            final_loss: loss,
            p_samples: Vec::new(),
            quad: None,
            p_star: None,
            init_loss: loss,
            loss_trace: vec![loss],
            powell_iterations: 0,
            loss_evaluations: 1,
            timings: None,
        });
    }

    let t = Instant::now();
    let calibrator = LayerwiseCalibrator::new(model, calib)?;
    let grid: Vec<f64> = match cfg.phase {
        Phase::Lw => vec![cfg.lw_p],
        _ => cfg.p_grid.clone(),
    };
    let mut p_samples = Vec::with_capacity(grid.len());
    for &p in &grid {
        let delta = calibrator.calibrate(p)?;
        let loss = eval(&delta)?;
        p_samples.push(PNormSample { p, delta, loss });
    }
    let layerwise_s = secs(t.elapsed());

    if cfg.phase == Phase::Lw {
        let s = p_samples[0].clone();
        return Ok(LapqResult {
            delta_star: s.delta.clone(),
            final_loss: s.loss,
            p_star: Some(s.p),
            init_loss: s.loss,
            loss_trace: vec![s.loss],
            p_samples,
            quad: None,
            powell_iterations: 0,
            loss_evaluations: 1,
            timings: Some(PhaseTimings {
                layerwise_s,
                ..Default::default()
            }),
        });
    }

    let t = Instant::now();
    let qa = quad_approx(&p_samples, |p| calibrator.calibrate(p), &mut eval)?;
    let quadratic_s = secs(t.elapsed());
    let mut evaluations = obj.evaluations;

    if cfg.phase == Phase::Qa || cfg.powell.max_outer == 0 {
        return Ok(LapqResult {
            delta_star: qa.delta,
            final_loss: qa.loss,
            p_samples,
            quad: Some(qa.fit),
            p_star: Some(qa.p),
            init_loss: qa.loss,
            loss_trace: vec![qa.loss],
            powell_iterations: 0,
            loss_evaluations: evaluations,
            timings: Some(PhaseTimings {
                layerwise_s,
                quadratic_s,
                joint_s: 0.0,
            }),
        });
    }

    let t = Instant::now();
    obj.evaluations = 0;
    let report = powell(qa.delta.as_slice(), |x| obj.eval(x), &cfg.powell)?;
    if let Some(e) = obj.error.take() {
        return Err(e);
    }
    evaluations += obj.evaluations;
    let joint_s = secs(t.elapsed());

    // Powell re-evaluates the start; it is the same deterministic loss
    debug_assert_eq!(report.start_fx.to_bits(), qa.loss.to_bits());
    let (delta_star, final_loss) = if report.fx < qa.loss {
        (StepVector::new(report.x), report.fx)
    } else {
        (qa.delta.clone(), qa.loss)
    };
    Ok(LapqResult {
        delta_star,
        final_loss,
        p_samples,
        quad: Some(qa.fit),
        p_star: Some(qa.p),
        init_loss: qa.loss,
        loss_trace: report.trace,
        powell_iterations: report.iterations,
        loss_evaluations: evaluations,
        timings: Some(PhaseTimings {
            layerwise_s,
            quadratic_s,
            joint_s,
        }),
    })
}
