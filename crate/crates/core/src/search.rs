//! One-dimensional minimization helpers shared by the layer-wise calibration
//! and Powell's line searches.

/// `(3 - √5) / 2`, the golden-section fraction.
const GOLDEN: f64 = 0.381_966_011_250_105_1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub x: f64,
    pub fx: f64,
}

/// Golden-section search for a minimum of `f` on `[lo, hi]`.
///
/// Stops once the bracket is narrower than `tol`. The returned point is the
/// best one evaluated, which is never worse than any probe.
pub fn golden_section(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> Minimum {
    let (mut a, mut b) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let mut x1 = a + GOLDEN * (b - a);
    let mut x2 = b - GOLDEN * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut best = if f2 < f1 { Minimum { x: x2, fx: f2 } } else { Minimum { x: x1, fx: f1 } };
    // guards against tol below the floating-point resolution of the bracket
    let mut guard = 0;
    while b - a > tol && guard < 200 {
        guard += 1;
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = a + GOLDEN * (b - a);
            f1 = f(x1);
            if f1 < best.fx {
                best = Minimum { x: x1, fx: f1 };
            }
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = b - GOLDEN * (b - a);
            f2 = f(x2);
            if f2 < best.fx {
                best = Minimum { x: x2, fx: f2 };
            }
        }
    }
    best
}

/// Vertex of the parabola through three points, if it opens upward.
pub fn parabola_vertex(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> Option<f64> {
    let (x1, y1) = a;
    let (x2, y2) = b;
    let (x3, y3) = c;
    let denom = (x1 - x2) * (x1 - x3) * (x2 - x3);
    if denom == 0.0 {
        return None;
    }
    let curv = (x3 * (y2 - y1) + x2 * (y1 - y3) + x1 * (y3 - y2)) / denom;
    if !(curv > 0.0) {
        return None;
    }
    let lin = (x3 * x3 * (y1 - y2) + x2 * x2 * (y3 - y1) + x1 * x1 * (y2 - y3)) / denom;
    let v = -lin / (2.0 * curv);
    v.is_finite().then_some(v)
}
