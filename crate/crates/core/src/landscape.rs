//! Loss-landscape diagnostics over the step-size vector: 2-D grid scans,
//! finite-difference gradient and Hessian, Gaussian curvature and the
//! quantization interaction term `εᵀHε`.
//!
//! Every probe is an independent loss evaluation, so probes run in parallel;
//! results are assembled in a fixed order and do not depend on scheduling.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CalibSet, QuantizedModel};
use crate::steps::StepVector;

pub const DEFAULT_H_REL: f64 = 0.01;

/// The calibration loss of `model` as a function of the full step vector.
pub fn model_loss<'a>(
    model: &'a QuantizedModel,
    calib: &'a CalibSet,
) -> impl Fn(&[f64]) -> Result<f64> + Sync + 'a {
    move |x: &[f64]| model.loss(calib, &StepVector::new(x.to_vec()))
}

fn check_base(delta: &[f64], h_rel: f64, indices: &[usize]) -> Result<()> {
    if !(h_rel > 0.0 && h_rel < 0.5) {
        return Err(Error::InvalidArgument(format!("h_rel must lie in (0, 0.5), got {h_rel}")));
    }
    if let Some(i) = delta.iter().position(|&d| !(d > 0.0) || !d.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step {i} is {}, expected a positive finite value",
            delta[i]
        )));
    }
    for (k, &i) in indices.iter().enumerate() {
        if i >= delta.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter index {i} out of range for {} steps",
                delta.len()
            )));
        }
        if indices[..k].contains(&i) {
            return Err(Error::InvalidArgument(format!("parameter index {i} repeated")));
        }
    }
    Ok(())
}

/// Evaluates `f` at `base` shifted by `(index, offset)` pairs, in parallel,
/// returning values in probe order.
fn probe_all<F>(f: &F, base: &[f64], probes: &[Vec<(usize, f64)>]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    probes
        .par_iter()
        .map(|shift| {
            let mut x = base.to_vec();
            for &(i, off) in shift {
                x[i] += off;
            }
            let v = f(&x)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFiniteLoss(format!("loss {v} at probe {shift:?}")))
            }
        })
        .collect()
}

fn all_indices(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Central-difference gradient over `indices` (all parameters if `None`),
/// with steps `h_i = h_rel·Δ_i`. Entries follow the order of `indices`.
pub fn gradient<F>(f: &F, delta: &[f64], h_rel: f64, indices: Option<&[usize]>) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let idx = indices.map_or_else(|| all_indices(delta.len()), <[usize]>::to_vec);
    check_base(delta, h_rel, &idx)?;
    let probes: Vec<Vec<(usize, f64)>> = idx
        .iter()
        .flat_map(|&i| {
            let h = h_rel * delta[i];
            [vec![(i, h)], vec![(i, -h)]]
        })
        .collect();
    let v = probe_all(f, delta, &probes)?;
    Ok(idx
        .iter()
        .enumerate()
        .map(|(k, &i)| (v[2 * k] - v[2 * k + 1]) / (2.0 * h_rel * delta[i]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianMatrix {
    /// Positions in the step vector of the rows and columns.
    pub indices: Vec<usize>,
    /// Full base point.
    pub delta: Vec<f64>,
    /// Finite-difference step for each row.
    pub steps: Vec<f64>,
    /// Row-major `n×n` entries.
    pub values: Vec<Vec<f64>>,
}

impl HessianMatrix {
    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| self.values[i][j].to_bits() == self.values[j][i].to_bits()))
    }

    pub fn determinant(&self) -> Determinant {
        determinant(&self.values)
    }

    /// Largest off-diagonal magnitude relative to the largest diagonal one.
    pub fn offdiag_ratio(&self) -> f64 {
        let n = self.dim();
        let mut diag = 0.0f64;
        let mut off = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    diag = diag.max(self.values[i][j].abs());
                } else {
                    off = off.max(self.values[i][j].abs());
                }
            }
        }
        if diag == 0.0 {
            if off == 0.0 { 0.0 } else { f64::INFINITY }
        } else {
            off / diag
        }
    }

    /// `Σ_{i≠j} |H_ij| / Σ_i |H_ii|`: how much of the curvature couples
    /// different parameters.
    pub fn offdiag_mass_ratio(&self) -> f64 {
        let n = self.dim();
        let (mut diag, mut off) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    diag += self.values[i][j].abs();
                } else {
                    off += self.values[i][j].abs();
                }
            }
        }
        if diag == 0.0 {
            if off == 0.0 { 0.0 } else { f64::INFINITY }
        } else {
            off / diag
        }
    }

    /// Header row `index,<i_1>,…,<i_n>`, then one row per parameter:
    /// its index followed by the matrix row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index");
        for i in &self.indices {
            let _ = write!(s, ",{i}");
        }
        s.push('\n');
        for (row, i) in self.values.iter().zip(&self.indices) {
            let _ = write!(s, "{i}");
            for v in row {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
        s
    }
}

/// Finite-difference Hessian over `indices` (all parameters if `None`).
///
/// Diagonal entries use the three-point stencil and off-diagonal entries the
/// four-point cross stencil, with `h_i = h_rel·Δ_i`. Each off-diagonal pair
/// is computed once and mirrored, so the result is exactly symmetric.
pub fn hessian<F>(f: &F, delta: &[f64], h_rel: f64, indices: Option<&[usize]>) -> Result<HessianMatrix>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let idx = indices.map_or_else(|| all_indices(delta.len()), <[usize]>::to_vec);
    check_base(delta, h_rel, &idx)?;
    let n = idx.len();
    let steps: Vec<f64> = idx.iter().map(|&i| h_rel * delta[i]).collect();

    // probe 0 is the base point, then ± per diagonal, then four per pair
    let mut probes: Vec<Vec<(usize, f64)>> = vec![Vec::new()];
    for (k, &i) in idx.iter().enumerate() {
        probes.push(vec![(i, steps[k])]);
        probes.push(vec![(i, -steps[k])]);
    }
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let (i, j, hi, hj) = (idx[a], idx[b], steps[a], steps[b]);
            pairs.push((a, b));
            probes.push(vec![(i, hi), (j, hj)]);
            probes.push(vec![(i, hi), (j, -hj)]);
            probes.push(vec![(i, -hi), (j, hj)]);
            probes.push(vec![(i, -hi), (j, -hj)]);
        }
    }
    let v = probe_all(f, delta, &probes)?;

    let mut values = vec![vec![0.0; n]; n];
    let f0 = v[0];
    for k in 0..n {
        values[k][k] = (v[1 + 2 * k] - 2.0 * f0 + v[2 + 2 * k]) / (steps[k] * steps[k]);
    }
    let off = 1 + 2 * n;
    for (p, &(a, b)) in pairs.iter().enumerate() {
        let q = &v[off + 4 * p..off + 4 * p + 4];
        let h = (q[0] - q[1] - q[2] + q[3]) / (4.0 * steps[a] * steps[b]);
        values[a][b] = h;
        values[b][a] = h;
    }
    Ok(HessianMatrix {
        indices: idx,
        delta: delta.to_vec(),
        steps,
        values,
    })
}

/// `det` as sign and log-magnitude, so tiny or huge values survive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Determinant {
    /// -1, 0 or 1.
    pub sign: f64,
    /// `ln|det|`; `-inf` for a singular matrix.
    pub log_abs: f64,
}

impl Determinant {
    pub fn value(&self) -> f64 {
        if self.sign == 0.0 {
            0.0
        } else {
            self.sign * self.log_abs.exp()
        }
    }
}

/// Determinant by LU decomposition with partial pivoting.
pub fn determinant(m: &[Vec<f64>]) -> Determinant {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut sign = 1.0;
    let mut log_abs = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .expect("non-empty range");
        if a[piv][col] == 0.0 {
            return Determinant { sign: 0.0, log_abs: f64::NEG_INFINITY };
        }
        if piv != col {
            a.swap(piv, col);
            sign = -sign;
        }
        let p = a[col][col];
        sign *= p.signum();
        log_abs += p.abs().ln();
        for r in col + 1..n {
            let factor = a[r][col] / p;
            if factor != 0.0 {
                for c in col..n {
                    a[r][c] -= factor * a[col][c];
                }
            }
        }
    }
    Determinant { sign, log_abs }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Curvature {
    /// `K`, which may underflow to 0 when `log_abs` is very negative.
    pub k: f64,
    pub sign: f64,
    pub log_abs: f64,
    pub det: Determinant,
    pub grad_norm: f64,
}

/// Gaussian curvature of the loss graph: `K = det(H) / (‖g‖² + 1)²`.
pub fn curvature(h: &[Vec<f64>], grad: &[f64]) -> Result<Curvature> {
    if h.iter().any(|row| row.len() != h.len()) {
        return Err(Error::Shape("Hessian is not square".into()));
    }
    if grad.len() != h.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for a {}×{} Hessian",
            grad.len(),
            h.len(),
            h.len()
        )));
    }
    let det = determinant(h);
    let g2 = grad.iter().fold(0.0, |acc, g| acc + g * g);
    let log_abs = det.log_abs - 2.0 * (g2 + 1.0).ln();
    let k = if det.sign == 0.0 { 0.0 } else { det.sign * log_abs.exp() };
    Ok(Curvature {
        k,
        sign: det.sign,
        log_abs,
        det,
        grad_norm: g2.sqrt(),
    })
}

pub fn gaussian_curvature(h: &HessianMatrix, grad: &[f64]) -> Result<f64> {
    curvature(&h.values, grad).map(|c| c.k)
}

fn check_eps(h: &HessianMatrix, eps: &[f64]) -> Result<()> {
    if eps.len() != h.dim() {
        return Err(Error::Shape(format!(
            "error vector has {} entries for a {}-dimensional Hessian",
            eps.len(),
            h.dim()
        )));
    }
    if let Some(i) = eps.iter().position(|e| !e.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    Ok(())
}

/// Quantization interaction term `εᵀHε`.
pub fn qit(h: &HessianMatrix, eps: &[f64]) -> Result<f64> {
    let (d, c) = qit_split(h, eps)?;
    Ok(d + c)
}

/// `εᵀHε` split into its separable part `Σ H_ii ε_i²` and the cross part
/// `Σ_{i≠j} H_ij ε_i ε_j`.
pub fn qit_split(h: &HessianMatrix, eps: &[f64]) -> Result<(f64, f64)> {
    check_eps(h, eps)?;
    let n = h.dim();
    let mut diag = 0.0;
    let mut cross = 0.0;
    for i in 0..n {
        diag += h.values[i][i] * eps[i] * eps[i];
        for j in i + 1..n {
            cross += 2.0 * h.values[i][j] * eps[i] * eps[j];
        }
    }
    Ok((diag, cross))
}

/// Losses over a 2-D grid of two step sizes, the others held at a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScan {
    pub index_i: usize,
    pub index_j: usize,
    pub values_i: Vec<f64>,
    pub values_j: Vec<f64>,
    /// `losses[r][c]` is the loss at `(values_i[r], values_j[c])`.
    pub losses: Vec<Vec<f64>>,
}

impl GridScan {
    pub fn range(&self) -> f64 {
        let it = self.losses.iter().flatten();
        let max = it.clone().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let min = it.fold(f64::INFINITY, |a, &b| a.min(b));
        max - min
    }

    /// First row: a corner label then the `Δ_j` values; each following row:
    /// a `Δ_i` value then the losses along `Δ_j`.
    pub fn to_csv(&self) -> String {
        let mut s = format!("delta_{}\\delta_{}", self.index_i, self.index_j);
        for v in &self.values_j {
            let _ = write!(s, ",{v:e}");
        }
        s.push('\n');
        for (vi, row) in self.values_i.iter().zip(&self.losses) {
            let _ = write!(s, "{vi:e}");
            for l in row {
                let _ = write!(s, ",{l:e}");
            }
            s.push('\n');
        }
        s
    }
}

/// `n` evenly spaced values from `lo` to `hi`, both ends exact.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|k| {
                if k == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * k as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// `n` values `center·(1 + span·s)` for `s` evenly spaced in `[-1, 1]`.
/// With odd `n` the middle value is exactly `center`.
pub fn relative_axis(center: f64, span: f64, n: usize) -> Vec<f64> {
    linspace(-1.0, 1.0, n)
        .into_iter()
        .map(|s| center * (1.0 + span * s))
        .collect()
}

/// Evaluates the loss at every `(values_i[r], values_j[c])` with all other
/// steps taken from `baseline`.
pub fn grid_scan<F>(
    f: &F,
    baseline: &[f64],
    index_i: usize,
    index_j: usize,
    values_i: &[f64],
    values_j: &[f64],
) -> Result<GridScan>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if index_i == index_j {
        return Err(Error::InvalidArgument(format!(
            "grid scan needs two different parameters, got {index_i} twice"
        )));
    }
    for i in [index_i, index_j] {
        if i >= baseline.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter index {i} out of range for {} steps",
                baseline.len()
            )));
        }
    }
    if values_i.len() < 2 || values_j.len() < 2 {
        return Err(Error::InvalidArgument("grid resolution must be at least 2".into()));
    }
    let cells: Vec<(f64, f64)> = values_i
        .iter()
        .flat_map(|&a| values_j.iter().map(move |&b| (a, b)))
        .collect();
    let flat = cells
        .par_iter()
        .map(|&(a, b)| {
            let mut x = baseline.to_vec();
            x[index_i] = a;
            x[index_j] = b;
            f(&x)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(GridScan {
        index_i,
        index_j,
        values_i: values_i.to_vec(),
        values_j: values_j.to_vec(),
        losses: flat.chunks(values_j.len()).map(<[f64]>::to_vec).collect(),
    })
}

/// `index,delta,gradient` rows in parameter order.
pub fn gradient_csv(indices: &[usize], delta: &[f64], grad: &[f64]) -> String {
    let mut s = String::from("index,delta,gradient\n");
    for (&i, g) in indices.iter().zip(grad) {
        let _ = writeln!(s, "{i},{:e},{g:e}", delta[i]);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ok(f: impl Fn(&[f64]) -> f64 + Sync) -> impl Fn(&[f64]) -> Result<f64> + Sync {
        move |x| Ok(f(x))
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn hessian_of_separable_quadratic() {
        let a = [0.5, 2.0, 7.0];
        let f = ok(move |x| x.iter().zip(a).map(|(x, a)| a * x * x).sum());
        let h = hessian(&f, &[0.3, 1.2, 0.05], DEFAULT_H_REL, None).unwrap();
        for i in 0..3 {
            assert!(rel(h.get(i, i), 2.0 * a[i]) < 1e-4, "{}", h.get(i, i));
            for j in 0..3 {
                if i != j {
                    assert!(h.get(i, j).abs() < 1e-6);
                }
            }
        }
        assert!(h.is_symmetric());
    }

    #[test]
    fn hessian_cross_term() {
        let f = ok(|x| x[0] * x[1]);
        let h = hessian(&f, &[0.7, 1.9], DEFAULT_H_REL, None).unwrap();
        assert!((h.get(0, 1) - 1.0).abs() < 1e-4);
        assert_eq!(h.get(0, 1).to_bits(), h.get(1, 0).to_bits());
        assert!(h.get(0, 0).abs() < 1e-6);
    }

    #[test]
    fn hessian_subvector_order() {
        let f = ok(|x| x[0] * x[0] + 3.0 * x[2] * x[2] + x[1] * x[2]);
        let h = hessian(&f, &[1.0, 1.0, 1.0], DEFAULT_H_REL, Some(&[2, 1])).unwrap();
        assert_eq!(h.indices, vec![2, 1]);
        assert!(rel(h.get(0, 0), 6.0) < 1e-6);
        assert!(rel(h.get(0, 1), 1.0) < 1e-6);
        assert!(h.get(1, 1).abs() < 1e-6);
    }

    #[test]
    fn hessian_and_gradient_errors() {
        let f = ok(|x| x[0]);
        assert!(hessian(&f, &[0.0], 0.01, None).is_err());
        assert!(hessian(&f, &[1.0], 0.0, None).is_err());
        assert!(hessian(&f, &[1.0], 0.5, None).is_err());
        assert!(hessian(&f, &[1.0, 1.0], 0.01, Some(&[2])).is_err());
        assert!(hessian(&f, &[1.0, 1.0], 0.01, Some(&[1, 1])).is_err());
        let nan = ok(|x| if x[0] > 1.0 { f64::NAN } else { x[0] });
        assert!(matches!(gradient(&nan, &[1.0], 0.01, None), Err(Error::NonFiniteLoss(_))));
        assert!(matches!(hessian(&nan, &[1.0], 0.01, None), Err(Error::NonFiniteLoss(_))));
    }

    #[test]
    fn gradient_of_sum() {
        let f = ok(|x| x.iter().sum());
        let g = gradient(&f, &[0.1, 2.0, 30.0], DEFAULT_H_REL, None).unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn gradient_one_dimensional_oracle() {
        let f = |x: f64| x.sin() * x.exp();
        let d = 0.8;
        let h = 0.01 * d;
        let g = gradient(&ok(move |x| f(x[0])), &[d], 0.01, None).unwrap();
        assert_eq!(g[0], (f(d + h) - f(d - h)) / (2.0 * h));
    }

    #[test]
    fn curvature_of_paraboloid() {
        let h = vec![vec![2.0, 0.0], vec![0.0, 2.0]];
        let c = curvature(&h, &[0.0, 0.0]).unwrap();
        assert!((c.k - 4.0).abs() < 1e-12);
        assert!((c.det.value() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn curvature_vanishes_with_large_gradient() {
        let h = vec![vec![2.0, 0.3], vec![0.3, 1.0]];
        let mut prev = f64::INFINITY;
        for g in [1.0, 10.0, 1e3, 1e6] {
            let k = curvature(&h, &[g, -g]).unwrap().k;
            assert!(k > 0.0 && k < prev);
            prev = k;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn curvature_errors_and_determinism() {
        assert!(curvature(&[vec![1.0, 0.0], vec![0.0]], &[0.0, 0.0]).is_err());
        assert!(curvature(&[vec![1.0]], &[0.0, 0.0]).is_err());
        let h = vec![vec![1e-3, 2e-4], vec![2e-4, 5e-4]];
        let a = curvature(&h, &[0.3, 0.1]).unwrap();
        let b = curvature(&h, &[0.3, 0.1]).unwrap();
        assert_eq!(a.k.to_bits(), b.k.to_bits());
    }

    #[test]
    fn tiny_determinant_in_log_space() {
        let n = 40;
        let h: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1e-10 } else { 0.0 }).collect())
            .collect();
        let d = determinant(&h);
        assert_eq!(d.sign, 1.0);
        assert!((d.log_abs - 400.0 * 1e-10f64.ln() / 10.0).abs() < 1e-9);
        assert_eq!(d.value(), 0.0);
    }

    #[test]
    fn determinant_sign_and_singular() {
        let d = determinant(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(d.sign, -1.0);
        assert!((d.value() + 1.0).abs() < 1e-15);
        let s = determinant(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert_eq!(s.value(), 0.0);
    }

    fn matrix(values: Vec<Vec<f64>>) -> HessianMatrix {
        let n = values.len();
        HessianMatrix {
            indices: (0..n).collect(),
            delta: vec![1.0; n],
            steps: vec![0.01; n],
            values,
        }
    }

    #[test]
    fn qit_examples() {
        let h = matrix(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(qit(&h, &[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(qit_split(&h, &[1.0, 1.0]).unwrap(), (0.0, 2.0));
        assert_eq!(h.offdiag_mass_ratio(), f64::INFINITY);
        let d = matrix(vec![vec![3.0, 0.0], vec![0.0, 0.5]]);
        assert_eq!(d.offdiag_mass_ratio(), 0.0);
        let m = matrix(vec![vec![2.0, -1.0], vec![-1.0, 2.0]]);
        assert_eq!(m.offdiag_mass_ratio(), 0.5);
        assert_eq!(m.offdiag_ratio(), 0.5);
        assert_eq!(qit_split(&d, &[0.2, -1.0]).unwrap().1, 0.0);
        assert!(qit(&d, &[1.0]).is_err());
        assert!(qit(&d, &[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn grid_scan_basics() {
        let f = ok(|x| x[0] * 10.0 + x[1] + 100.0 * x[2]);
        let base = [1.0, 2.0, 3.0];
        let vi = relative_axis(base[0], 0.5, 3);
        let vj = relative_axis(base[2], 0.5, 3);
        assert_eq!(vi[1], base[0]);
        let g = grid_scan(&f, &base, 0, 2, &vi, &vj).unwrap();
        assert_eq!(g.losses.len(), 3);
        assert!(g.losses.iter().all(|r| r.len() == 3));
        assert_eq!(g.losses[1][1].to_bits(), f(&base).unwrap().to_bits());
        assert_eq!(g.losses[0][2], f(&[vi[0], 2.0, vj[2]]).unwrap());
        let csv = g.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().all(|l| l.split(',').count() == 4));
        assert!(grid_scan(&f, &base, 1, 1, &vi, &vj).is_err());
        assert!(grid_scan(&f, &base, 1, 3, &vi, &vj).is_err());
        assert!(grid_scan(&f, &base, 0, 1, &vi[..1], &vj).is_err());
    }

    #[test]
    fn csv_shapes() {
        let f = ok(|x| x[0] * x[1] + x[1] * x[1]);
        let h = hessian(&f, &[1.0, 2.0], 0.01, None).unwrap();
        let csv = h.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "index,0,1");
        assert_eq!(csv.lines().count(), 3);
        let g = gradient(&f, &[1.0, 2.0], 0.01, None).unwrap();
        let gc = gradient_csv(&[0, 1], &[1.0, 2.0], &g);
        assert_eq!(gc.lines().count(), 3);
    }

    proptest! {
        #[test]
        fn operators_are_linear_in_the_evaluator(
            delta in proptest::collection::vec(0.1f64..3.0, 1..5),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let f1 = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v * v).sum::<f64>();
            let f2 = |x: &[f64]| x.iter().fold(1.0, |acc, v| acc * (1.0 + 0.3 * v));
            let sum = ok(move |x| a * f1(x) + b * f2(x));
            let h1 = hessian(&ok(f1), &delta, 0.01, None).unwrap();
            let h2 = hessian(&ok(f2), &delta, 0.01, None).unwrap();
            let hs = hessian(&sum, &delta, 0.01, None).unwrap();
            prop_assert!(hs.is_symmetric());
            let n = delta.len();
            for i in 0..n {
                for j in 0..n {
                    let want = a * h1.get(i, j) + b * h2.get(i, j);
                    prop_assert!((hs.get(i, j) - want).abs() <= 1e-6 * (1.0 + want.abs()));
                }
            }
            let g1 = gradient(&ok(f1), &delta, 0.01, None).unwrap();
            let g2 = gradient(&ok(f2), &delta, 0.01, None).unwrap();
            let gs = gradient(&sum, &delta, 0.01, None).unwrap();
            for i in 0..n {
                let want = a * g1[i] + b * g2[i];
                prop_assert!((gs[i] - want).abs() <= 1e-9 * (1.0 + want.abs()));
            }
        }

        #[test]
        fn qit_split_sums_to_qit(
            vals in proptest::collection::vec(-5.0f64..5.0, 16),
            eps in proptest::collection::vec(-1.0f64..1.0, 4),
        ) {
            let n = 4;
            let mut m = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in i..n {
                    m[i][j] = vals[i * n + j];
                    m[j][i] = vals[i * n + j];
                }
            }
            let h = matrix(m.clone());
            let (d, c) = qit_split(&h, &eps).unwrap();
            let direct: f64 = (0..n).map(|i| (0..n).map(|j| eps[i] * m[i][j] * eps[j]).sum::<f64>()).sum();
            prop_assert!((d + c - qit(&h, &eps).unwrap()).abs() <= 1e-12);
            prop_assert!((d + c - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        }

        #[test]
        fn lu_determinant_matches_cofactor_expansion(vals in proptest::collection::vec(-3.0f64..3.0, 9)) {
            let m: Vec<Vec<f64>> = vals.chunks(3).map(<[f64]>::to_vec).collect();
            let cof = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            let d = determinant(&m).value();
            prop_assert!((d - cof).abs() <= 1e-10 * (1.0 + cof.abs()));
        }
    }
}
