//! Powell's derivative-free direction-set method with a bounded bracketing
//! line search.
//!
//! Each outer iteration minimizes along every direction in turn, drops the
//! oldest direction, appends the net displacement `t_N - t_0`, and does one
//! more line search along it. The best point ever evaluated is returned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::{golden_section, parabola_vertex};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    /// Golden-section stopping width relative to the step scale.
    pub tol_rel: f64,
    /// Bracket growth factor.
    pub growth: f64,
    /// Bracket expansion is first clamped at this fraction of `‖t‖`; it only
    /// continues past it while the loss keeps decreasing.
    pub max_span: f64,
}

impl Default for LineSearch {
    fn default() -> Self {
        LineSearch {
            tol_rel: 1e-4,
            growth: 2.0,
            max_span: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowellConfig {
    pub max_outer: usize,
    /// Stop once an outer iteration improves the loss by less than this
    /// fraction.
    pub ftol: f64,
    pub line_search: LineSearch,
    /// Initial directions are `initial_scale · |start_i| · e_i`.
    pub initial_scale: f64,
}

impl Default for PowellConfig {
    fn default() -> Self {
        PowellConfig {
            max_outer: 20,
            ftol: 1e-4,
            line_search: LineSearch::default(),
            initial_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowellReport {
    pub x: Vec<f64>,
    pub fx: f64,
    pub start_fx: f64,
    /// Best loss before the first and after every outer iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub direction_resets: usize,
}

/// Records the best point seen across all evaluations.
struct Tracked<F> {
    f: F,
    best_x: Vec<f64>,
    best_fx: f64,
    evaluations: usize,
}

impl<F: FnMut(&[f64]) -> f64> Tracked<F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evaluations += 1;
        let fx = (self.f)(x);
        let fx = if fx.is_nan() { f64::INFINITY } else { fx };
        if fx < self.best_fx {
            self.best_fx = fx;
            self.best_x = x.to_vec();
        }
        fx
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, &x| acc + x * x).sqrt()
}

fn axpy(t: &[f64], lambda: f64, d: &[f64]) -> Vec<f64> {
    t.iter().zip(d).map(|(&a, &b)| a + lambda * b).collect()
}

/// Result of a line search from `t` along `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineMin {
    pub lambda: f64,
    pub f: f64,
    /// The interval that was searched; `lambda` always lies inside it.
    pub bracket: (f64, f64),
}

/// Minimizes `f(t + λd)` over a bounded bracket.
///
/// Never returns a point worse than `λ = 0`, whose value is `ft`.
pub fn line_minimize(
    f: &mut impl FnMut(&[f64]) -> f64,
    t: &[f64],
    ft: f64,
    d: &[f64],
    cfg: &LineSearch,
) -> LineMin {
    let nd = norm(d);
    if nd == 0.0 || !nd.is_finite() {
        return LineMin { lambda: 0.0, f: ft, bracket: (0.0, 0.0) };
    }
    let cap = cfg.max_span * norm(t).max(nd) / nd;
    let mut probes: Vec<(f64, f64)> = vec![(0.0, ft)];
    let mut phi = |lambda: f64, probes: &mut Vec<(f64, f64)>| {
        let v = f(&axpy(t, lambda, d));
        let v = if v.is_nan() { f64::INFINITY } else { v };
        probes.push((lambda, v));
        v
    };

    let s0 = cap.min(1.0);
    let f_plus = phi(s0, &mut probes);
    let (lo, hi) = if f_plus < ft {
        expand(&mut phi, &mut probes, (0.0, ft), (s0, f_plus), cap, cfg.growth)
    } else {
        let f_minus = phi(-s0, &mut probes);
        if f_minus < ft {
            expand(&mut phi, &mut probes, (0.0, ft), (-s0, f_minus), cap, cfg.growth)
        } else {
            (-s0, s0)
        }
    };

    let scale = s0.max(
        probes
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map_or(0.0, |p| p.0.abs()),
    );
    golden_section(|l| phi(l, &mut probes), lo, hi, cfg.tol_rel * scale);

    let best_probe = |probes: &[(f64, f64)]| {
        *probes.iter().min_by(|a, b| a.1.total_cmp(&b.1)).expect("probes")
    };
    // λ = 0 belongs to the searched interval even when the bracket excludes it
    let (span_lo, span_hi) = (lo.min(0.0), hi.max(0.0));
    let neighbours = |probes: &[(f64, f64)], at: f64| {
        let left = probes
            .iter()
            .filter(|p| p.0 < at && p.0 >= span_lo)
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .copied();
        let right = probes
            .iter()
            .filter(|p| p.0 > at && p.0 <= span_hi)
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .copied();
        left.zip(right)
    };
    // nearest probe at least `gap` away on each side, or the farthest one
    // when the bracket end is closer than that
    let wide = |probes: &[(f64, f64)], at: f64, gap: f64| {
        let side = |sign: f64| {
            let inside = probes
                .iter()
                .filter(|p| sign * (p.0 - at) > 0.0 && p.0 >= span_lo && p.0 <= span_hi);
            let far = inside.clone().max_by(|a, b| (sign * a.0).total_cmp(&(sign * b.0))).copied();
            inside
                .filter(|p| sign * (p.0 - at) >= gap)
                .min_by(|a, b| (sign * a.0).total_cmp(&(sign * b.0)))
                .copied()
                .or(far)
        };
        side(-1.0).zip(side(1.0))
    };
    let vertex_of = |best: (f64, f64), (l, r): ((f64, f64), (f64, f64))| {
        parabola_vertex(l, best, r).filter(|&v| v > l.0 && v < r.0 && v != best.0)
    };

    // parabola through widely spaced probes: exact on a quadratic up to
    // rounding, and it wins ties within a few ulps, since near the minimum
    // the loss values can no longer tell a better point from a worse one
    let best = best_probe(&probes);
    let mut result = None;
    if let Some(v) = wide(&probes, best.0, 0.25 * (hi - lo)).and_then(|n| vertex_of(best, n)) {
        let fv = phi(v, &mut probes);
        if fv <= best.1 + TIE_ULPS * f64::EPSILON * best.1.abs() && fv <= ft {
            result = Some((v, fv));
        }
    }
    if result.is_none() {
        // otherwise a few steps through the nearest neighbours
        for _ in 0..3 {
            let best = best_probe(&probes);
            let Some(v) = neighbours(&probes, best.0).and_then(|n| vertex_of(best, n)) else {
                break;
            };
            if !(phi(v, &mut probes) < best.1) {
                break;
            }
        }
    }

    let best = result.unwrap_or_else(|| {
        probes
            .iter()
            .filter(|p| p.0 >= span_lo && p.0 <= span_hi)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.abs().total_cmp(&b.0.abs())))
            .copied()
            .expect("λ = 0 is always a probe")
    });
    LineMin {
        lambda: best.0,
        f: best.1,
        bracket: (span_lo, span_hi),
    }
}

const MAX_EXPANSIONS: usize = 64;
/// Rounding slack, in units of the best value, within which the wide
/// parabola vertex still counts as a tie.
const TIE_ULPS: f64 = 64.0;

/// Grows the step geometrically from `b` (which improved on `a`) until the
/// value rises. Returns the bracket to refine.
fn expand(
    phi: &mut impl FnMut(f64, &mut Vec<(f64, f64)>) -> f64,
    probes: &mut Vec<(f64, f64)>,
    a: (f64, f64),
    b: (f64, f64),
    cap: f64,
    growth: f64,
) -> (f64, f64) {
    let sign = b.0.signum();
    let (mut prev, mut cur) = (a, b);
    // the first stop is clamped to the cap; past it the step keeps growing
    // only while the loss still falls (infeasible points are +inf)
    for _ in 0..MAX_EXPANSIONS {
        let mag = cur.0.abs();
        let next_mag = if mag < cap { (mag * growth).min(cap) } else { mag * growth };
        let next = (sign * next_mag, phi(sign * next_mag, probes));
        if !(next.1 < cur.1) {
            return order(prev.0, next.0);
        }
        prev = cur;
        cur = next;
    }
    order(prev.0, cur.0)
}

fn order(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

fn scaled_axes(t: &[f64], scale: f64) -> Vec<Vec<f64>> {
    (0..t.len())
        .map(|i| {
            let mut d = vec![0.0; t.len()];
            d[i] = if t[i] != 0.0 { scale * t[i].abs() } else { scale };
            d
        })
        .collect()
}

/// Minimizes `f` from `start`.
pub fn powell(start: &[f64], f: impl FnMut(&[f64]) -> f64, cfg: &PowellConfig) -> Result<PowellReport> {
    let n = start.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot optimize a zero-dimensional point".into()));
    }
    let mut tr = Tracked {
        f,
        best_x: start.to_vec(),
        best_fx: f64::INFINITY,
        evaluations: 0,
    };
    let f0 = tr.eval(start);
    if !f0.is_finite() {
        return Err(Error::NonFiniteLoss(format!("loss at the starting point is {f0}")));
    }
    let mut eval = |x: &[f64]| tr.eval(x);

    let mut dirs = scaled_axes(start, cfg.initial_scale);
    let mut t0 = start.to_vec();
    let mut f_t0 = f0;
    let mut trace = vec![f0];
    let mut iterations = 0;
    let mut converged = false;
    let mut resets = 0;

    while iterations < cfg.max_outer {
        iterations += 1;
        let f_begin = f_t0;
        let mut t = t0.clone();
        let mut ft = f_t0;
        for d in &dirs {
            let m = line_minimize(&mut eval, &t, ft, d, &cfg.line_search);
            t = axpy(&t, m.lambda, d);
            ft = m.f;
        }
        let new_dir: Vec<f64> = t.iter().zip(&t0).map(|(a, b)| a - b).collect();
        dirs.remove(0);
        if norm(&new_dir) <= 1e-12 * norm(&t) {
            dirs = scaled_axes(&t, cfg.initial_scale);
            resets += 1;
        } else {
            dirs.push(new_dir);
            let d = dirs.last().expect("just pushed");
            let m = line_minimize(&mut eval, &t, ft, d, &cfg.line_search);
            t = axpy(&t, m.lambda, d);
            ft = m.f;
        }
        t0 = t;
        f_t0 = ft;
        trace.push(trace.last().copied().unwrap_or(f0).min(ft));
        let improvement = f_begin - f_t0;
        if 2.0 * improvement <= cfg.ftol * (f_begin.abs() + f_t0.abs()) + 1e-25 {
            converged = true;
            break;
        }
    }

    let best_fx = tr.best_fx;
    if let Some(last) = trace.last_mut() {
        *last = last.min(best_fx);
    }
    Ok(PowellReport {
        x: tr.best_x,
        fx: best_fx,
        start_fx: f0,
        trace,
        iterations,
        evaluations: tr.evaluations,
        converged,
        direction_resets: resets,
    })
}
