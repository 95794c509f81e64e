//! Acceptance gate: every primary criterion at its stated tolerance and
//! runtime budget, one PASS/FAIL line each.

// `ensure!` negates float comparisons on purpose so NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use qtk_cli::config::Settings;
use qtk_core::calib::calibrate_model;
use qtk_core::landscape::{self, DEFAULT_H_REL};
use qtk_core::lapq::{quad_approx, QuadFit};
use qtk_core::powell::{powell, PowellConfig};
use qtk_core::{
    calibrate_tensor, lapq, BiasCorrection, CalibSet, LapqResult, Model, PNormSample, QuantParams, QuantizedModel,
    Result as QtkResult, StepVector, Tensor,
};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixture_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

struct Fixture {
    name: &'static str,
    model: Arc<Model>,
    calib: CalibSet,
    test: CalibSet,
}

fn fixture(name: &'static str) -> &'static Fixture {
    static CACHE: OnceLock<Mutex<HashMap<&'static str, &'static Fixture>>> = OnceLock::new();
    let mut cache = CACHE.get_or_init(Default::default).lock().unwrap();
    cache.entry(name).or_insert_with(|| {
        let dir = fixture_dir(name);
        let batch = Settings::default().batch_size;
        Box::leak(Box::new(Fixture {
            name,
            model: Arc::new(Model::load(dir.join("model.json")).unwrap()),
            calib: CalibSet::load(dir.join("calib_x.qtn"), dir.join("calib_y.qtn"), batch).unwrap(),
            test: CalibSet::load(dir.join("test_x.qtn"), dir.join("test_y.qtn"), batch).unwrap(),
        }))
    })
}

const FIXTURES: [&str; 2] = ["mlp", "cnn"];

fn settings(wbits: u8, abits: u8) -> Settings {
    Settings { wbits, abits, ..Settings::default() }
}

fn quantized(fx: &Fixture, s: &Settings) -> QuantizedModel {
    QuantizedModel::new(Arc::clone(&fx.model), s.quant_config()).unwrap()
}

/// LAPQ at default settings, shared between criteria.
fn lapq_run(fx: &'static Fixture, wbits: u8, abits: u8) -> LapqResult {
    type Runs = HashMap<(&'static str, u8, u8), LapqResult>;
    static CACHE: OnceLock<Mutex<Runs>> = OnceLock::new();
    let key = (fx.name, wbits, abits);
    if let Some(r) = CACHE.get_or_init(Default::default).lock().unwrap().get(&key) {
        return r.clone();
    }
    let s = settings(wbits, abits);
    let r = lapq(&quantized(fx, &s), &fx.calib, &s.lapq_config()).unwrap();
    CACHE.get().unwrap().lock().unwrap().insert(key, r.clone());
    r
}

fn fp_accuracy(fx: &Fixture) -> f64 {
    quantized(fx, &settings(32, 32)).accuracy(&fx.test, &StepVector::new(vec![])).unwrap()
}

// ---------------------------------------------------------------- quantizer

fn oracle_bounds(bits: u8, signed: bool) -> (f64, f64) {
    if signed {
        let h = 2f64.powi(bits as i32 - 1);
        (-h, h)
    } else {
        (0.0, 2f64.powi(bits as i32) - 1.0)
    }
}

/// Round half to even, written out.
fn oracle_round(r: f64) -> f64 {
    let f = r.floor();
    let frac = r - f;
    if frac > 0.5 || (frac == 0.5 && f % 2.0 != 0.0) {
        f + 1.0
    } else {
        f
    }
}

fn random_params(rng: &mut ChaCha8Rng) -> QuantParams {
    let bits = rng.gen_range(2..=8u8);
    let signed = rng.gen_bool(0.5);
    let delta = 10f64.powf(rng.gen_range(-4.0..1.0));
    QuantParams::new(delta, bits, signed).unwrap()
}

fn random_input(rng: &mut ChaCha8Rng, q: &QuantParams) -> f64 {
    let (lo, hi) = oracle_bounds(q.bits(), q.signed());
    let span = (hi - lo).max(1.0) * q.delta();
    match rng.gen_range(0..10) {
        // exact ties between levels
        0 => (rng.gen_range(lo as i64..=hi as i64) as f64 + 0.5) * q.delta(),
        1 => rng.gen_range(-1e6..1e6),
        _ => rng.gen_range(-1.5..1.5) * span,
    }
}

fn quantizer_suite() -> Check {
    const CASES: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..CASES {
        let q = random_params(&mut rng);
        let x = random_input(&mut rng, &q);
        let y = q.quantize_value(x);
        ensure!(q.quantize_value(y) == y, "not idempotent at x={x} {q:?}");
    }
    for _ in 0..CASES {
        let q = random_params(&mut rng);
        let (lo, hi) = oracle_bounds(q.bits(), q.signed());
        let y = q.quantize_value(random_input(&mut rng, &q));
        ensure!(y >= lo * q.delta() && y <= hi * q.delta(), "{y} outside bounds of {q:?}");
    }
    for _ in 0..CASES {
        let q = random_params(&mut rng);
        let (a, b) = (random_input(&mut rng, &q), random_input(&mut rng, &q));
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        ensure!(q.quantize_value(a) <= q.quantize_value(b), "not monotone at {a}, {b} {q:?}");
    }
    for _ in 0..CASES {
        let q = random_params(&mut rng);
        let x = random_input(&mut rng, &q);
        let (lo, hi) = oracle_bounds(q.bits(), q.signed());
        let k = oracle_round(x / q.delta()).clamp(lo, hi);
        ensure!(q.quantize_value(x) == k * q.delta(), "x={x}: got {} want level {k} of {q:?}", q.quantize_value(x));
    }
    Ok(format!("4 properties x {CASES} cases"))
}

// ---------------------------------------------------------------- Lp oracle

/// `Σ|Q(x) - x|^p` for p = 1..=4 in one pass.
fn oracle_lp_sums(x: &[f64], delta: f64, lo: f64, hi: f64) -> [f64; 4] {
    let mut acc = [0.0; 4];
    for &v in x {
        let e = (oracle_round(v / delta).clamp(lo, hi) * delta - v).abs();
        let mut ek = e;
        for a in &mut acc {
            *a += ek;
            ek *= e;
        }
    }
    acc
}

fn oracle_lp_error(x: &[f64], delta: f64, lo: f64, hi: f64, p: i32) -> f64 {
    oracle_lp_sums(x, delta, lo, hi)[p as usize - 1].powf(1.0 / p as f64)
}

fn random_tensor(rng: &mut ChaCha8Rng, signed: bool) -> Vec<f64> {
    let n = rng.gen_range(48..=128);
    let normal = Normal::new(0.0, rng.gen_range(0.05..2.0)).unwrap();
    let kind = rng.gen_range(0..3);
    (0..n)
        .map(|_| {
            let v: f64 = match kind {
                0 => normal.sample(rng),
                // Laplace by inverse transform
                1 => {
                    let u: f64 = rng.gen_range(-0.5..0.5);
                    -u.signum() * (1.0 - 2.0 * u.abs()).ln()
                }
                _ => rng.gen_range(-1.0..1.0),
            };
            if signed {
                v
            } else {
                v.max(0.0)
            }
        })
        .collect()
}

fn lp_calibration_oracle() -> Check {
    const TENSORS: usize = 50;
    const GRID: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for t in 0..TENSORS {
        let signed = t % 4 != 3;
        let mut x = random_tensor(&mut rng, signed);
        if x.iter().all(|&v| v == 0.0) {
            x[0] = 1.0;
        }
        let tensor = Tensor::vector(x.clone()).unwrap();
        let max_abs = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for bits in [2u8, 3, 4] {
            let (lo, hi) = oracle_bounds(bits, signed);
            let top = hi;
            let delta_hi = max_abs / top;
            let mut grid_min = [f64::INFINITY; 4];
            for k in 1..=GRID {
                let sums = oracle_lp_sums(&x, delta_hi * k as f64 / GRID as f64, lo, hi);
                for (m, s) in grid_min.iter_mut().zip(sums) {
                    *m = m.min(s);
                }
            }
            for p in [1i32, 2, 3, 4] {
                let got = calibrate_tensor(&tensor, bits, signed, p as f64).map_err(|e| e.to_string())?;
                let e_got = oracle_lp_error(&x, got.delta(), lo, hi, p);
                let e_grid = grid_min[p as usize - 1].powf(1.0 / p as f64);
                let rel = e_got / e_grid - 1.0;
                worst = worst.max(rel);
                ensure!(
                    rel <= 0.005,
                    "tensor {t} M={bits} p={p}: error {e_got} vs grid minimum {e_grid}"
                );
            }
        }
    }
    Ok(format!("{TENSORS} tensors x 3 bitwidths x 4 norms, worst excess {:.3e}", worst.max(0.0)))
}

// ---------------------------------------------------------------- Powell

fn powell_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    const CASES: usize = 200;
    for case in 0..CASES {
        let n = 1 + case % 4;
        let b: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (0..n).map(|k| b[k][i] * b[k][j]).sum::<f64>() + if i == j { 0.3 } else { 0.0 })
                    .collect()
            })
            .collect();
        let m: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let start: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let f = |x: &[f64]| {
            let d: Vec<f64> = x.iter().zip(&m).map(|(a, b)| a - b).collect();
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += d[i] * a[i][j] * d[j];
                }
            }
            0.5 * s + 1.0
        };
        let cfg = PowellConfig { max_outer: n, ftol: 0.0, ..Default::default() };
        let r = powell(&start, f, &cfg).map_err(|e| e.to_string())?;
        let err = r.x.iter().zip(&m).fold(0.0f64, |w, (a, b)| w.max((a - b).abs()));
        worst = worst.max(err);
        ensure!(r.iterations <= n, "case {case}: {} iterations for dim {n}", r.iterations);
        ensure!(err <= 1e-6, "case {case} (dim {n}): distance {err:e} from the minimum");
    }
    let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
    let cfg = PowellConfig { max_outer: 200, ftol: 1e-14, ..Default::default() };
    let r = powell(&[-1.2, 1.0], rosen, &cfg).map_err(|e| e.to_string())?;
    ensure!(r.iterations <= 200 && r.fx < 1e-6, "Rosenbrock f={} after {} iterations", r.fx, r.iterations);
    Ok(format!(
        "{CASES} quadratics worst error {worst:.2e}; Rosenbrock f={:.2e} in {} iterations",
        r.fx, r.iterations
    ))
}

// ---------------------------------------------------------------- quadratic fit

fn quadratic_approximation() -> Check {
    let grid = Settings::default().p_grid;
    let (a, p0, c) = (0.37, 3.13, 0.21);
    let exact: Vec<(f64, f64)> = grid.iter().map(|&p| (p, a * (p - p0) * (p - p0) + c)).collect();
    let fit = QuadFit::fit(&exact).map_err(|e| e.to_string())?;
    ensure!((fit.p_star - p0).abs() <= 1e-9, "p* = {} for vertex {p0}", fit.p_star);

    // concave data: the best sample wins and no extra calibration happens
    let concave: Vec<PNormSample> = grid
        .iter()
        .map(|&p| PNormSample {
            p,
            delta: StepVector::new(vec![p]),
            loss: 2.0 - 0.4 * (p - 3.0) * (p - 3.0) + 0.01 * p,
        })
        .collect();
    let best = concave.iter().min_by(|x, y| x.loss.total_cmp(&y.loss)).unwrap().p;
    let mut calibrations = 0;
    let qa = quad_approx(
        &concave,
        |_| {
            calibrations += 1;
            Ok(StepVector::new(vec![0.0]))
        },
        |d| Ok(d[0]),
    )
    .map_err(|e| e.to_string())?;
    ensure!(qa.fit.a < 0.0, "concave data fitted with a = {}", qa.fit.a);
    ensure!(qa.fit.p_star == best && qa.p == best, "fallback chose p={} (best sample {best})", qa.p);
    ensure!(calibrations == 0, "fallback calibrated {calibrations} extra points");
    Ok(format!("p* = {:.15} for vertex {p0}; concave fallback to p = {best}", fit.p_star))
}

// ---------------------------------------------------------------- end to end

const E2E_CONFIGS: [(u8, u8); 3] = [(4, 4), (3, 3), (2, 4)];

fn end_to_end_dominance() -> Check {
    let mut lines = Vec::new();
    for name in FIXTURES {
        let fx = fixture(name);
        for (w, a) in E2E_CONFIGS {
            let s = settings(w, a);
            let q = quantized(fx, &s);
            let r = lapq_run(fx, w, a);
            let min_p = r.p_samples.iter().map(|s| s.loss).fold(f64::INFINITY, f64::min);
            ensure!(r.final_loss <= min_p, "{name} {w}/{a}: final {} > min over p {min_p}", r.final_loss);
            ensure!(
                r.loss_trace.windows(2).all(|w| w[1] <= w[0]),
                "{name} {w}/{a}: trace not monotone {:?}",
                r.loss_trace
            );
            ensure!(
                r.loss_trace.iter().all(|&l| l <= min_p),
                "{name} {w}/{a}: trace exceeds min over p: {:?}",
                r.loss_trace
            );
            ensure!(
                r.loss_trace.last() == Some(&r.final_loss),
                "{name} {w}/{a}: trace does not end at the final loss"
            );
            let mmse = calibrate_model(&q, &fx.calib, 2.0).unwrap();
            let acc_mmse = q.accuracy(&fx.test, &mmse).unwrap();
            let acc = q.accuracy(&fx.test, &r.delta_star).unwrap();
            ensure!(acc >= acc_mmse - 0.005, "{name} {w}/{a}: accuracy {acc} vs MMSE {acc_mmse}");
            lines.push(format!(
                "{name} {w}/{a} loss {:.4}<={min_p:.4} acc {acc:.4} vs {acc_mmse:.4}",
                r.final_loss
            ));
        }
    }
    Ok(lines.join("; "))
}

fn eight_bit() -> Check {
    let mut lines = Vec::new();
    for name in FIXTURES {
        let fx = fixture(name);
        let r = lapq_run(fx, 8, 8);
        let acc = quantized(fx, &settings(8, 8)).accuracy(&fx.test, &r.delta_star).unwrap();
        let fp = fp_accuracy(fx);
        ensure!((acc - fp).abs() <= 0.005, "{name}: 8/8 accuracy {acc} vs full precision {fp}");
        lines.push(format!("{name} {acc:.4} vs {fp:.4}"));
    }
    Ok(lines.join("; "))
}

// ---------------------------------------------------------------- curvature

struct Landscape {
    k: f64,
    range: f64,
    mass: f64,
}

/// Weight quantization at `bits`, activations at full precision, measured at
/// the p = 2 layer-wise point over all weight steps.
fn weight_landscape(fx: &Fixture, bits: u8) -> QtkResult<Landscape> {
    let q = quantized(fx, &settings(bits, 32));
    let delta = calibrate_model(&q, &fx.calib, 2.0)?;
    let idx = q.layout().weight_indices();
    let f = landscape::model_loss(&q, &fx.calib);
    let h = landscape::hessian(&f, delta.as_slice(), DEFAULT_H_REL, Some(&idx))?;
    let g = landscape::gradient(&f, delta.as_slice(), DEFAULT_H_REL, Some(&idx))?;
    let (i, j) = (idx[0], idx[1]);
    let vi = landscape::relative_axis(delta[i], 0.5, 21);
    let vj = landscape::relative_axis(delta[j], 0.5, 21);
    let grid = landscape::grid_scan(&f, delta.as_slice(), i, j, &vi, &vj)?;
    Ok(Landscape {
        k: landscape::gaussian_curvature(&h, &g)?,
        range: grid.range(),
        mass: h.offdiag_mass_ratio(),
    })
}

fn curvature_ordering() -> Check {
    let fx = fixture("cnn");
    let two = weight_landscape(fx, 2).map_err(|e| e.to_string())?;
    let four = weight_landscape(fx, 4).map_err(|e| e.to_string())?;
    let detail = format!(
        "K {:.3e} vs {:.3e}, grid range {:.4} vs {:.4}, off-diagonal mass {:.4} vs {:.4}",
        two.k, four.k, two.range, four.range, two.mass, four.mass
    );
    ensure!(two.k > four.k, "curvature not larger at 2 bits: {detail}");
    ensure!(two.range > four.range, "grid range not larger at 2 bits: {detail}");
    ensure!(two.mass > four.mass, "off-diagonal mass not larger at 2 bits: {detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- finite differences

fn rel_close(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want.abs()
}

fn finite_differences() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h_rel = DEFAULT_H_REL;

    // Σ a_i Δ_i²
    let a: Vec<f64> = (0..5).map(|_| rng.gen_range(0.1..3.0)).collect();
    let x: Vec<f64> = (0..5).map(|_| rng.gen_range(0.2..2.0)).collect();
    let f = |d: &[f64]| -> QtkResult<f64> { Ok(d.iter().zip(&a).map(|(d, a)| a * d * d).sum()) };
    let h = landscape::hessian(&f, &x, h_rel, None).map_err(|e| e.to_string())?;
    for i in 0..5 {
        ensure!(rel_close(h.get(i, i), 2.0 * a[i], 1e-4), "H[{i}][{i}] = {} want {}", h.get(i, i), 2.0 * a[i]);
        for j in 0..5 {
            ensure!(i == j || h.get(i, j).abs() <= 1e-4, "H[{i}][{j}] = {} want 0", h.get(i, j));
        }
    }

    // Δ₁Δ₂
    let f = |d: &[f64]| -> QtkResult<f64> { Ok(d[0] * d[1]) };
    let h = landscape::hessian(&f, &[0.7, 1.9], h_rel, None).map_err(|e| e.to_string())?;
    ensure!(rel_close(h.get(0, 1), 1.0, 1e-4), "cross term {}", h.get(0, 1));

    // Σ Δ_i
    let f = |d: &[f64]| -> QtkResult<f64> { Ok(d.iter().sum()) };
    let g = landscape::gradient(&f, &x, h_rel, None).map_err(|e| e.to_string())?;
    ensure!(g.iter().all(|v| (v - 1.0).abs() <= 1e-8), "gradient of a sum {g:?}");

    // a coupled smooth function against its analytic derivatives
    let f = |d: &[f64]| -> QtkResult<f64> { Ok((0.3 * d[0]).exp() * d[1] * d[1] + d[0] * d[2].sin() + d[1] * d[2] * d[3].ln()) };
    let x: [f64; 4] = [1.1, 0.8, 1.3, 2.2];
    let (e0, s2, c2, l3) = ((0.3 * x[0]).exp(), x[2].sin(), x[2].cos(), x[3].ln());
    let grad = [
        0.3 * e0 * x[1] * x[1] + s2,
        2.0 * e0 * x[1] + x[2] * l3,
        x[0] * c2 + x[1] * l3,
        x[1] * x[2] / x[3],
    ];
    let hess = [
        [0.09 * e0 * x[1] * x[1], 0.6 * e0 * x[1], c2, 0.0],
        [0.6 * e0 * x[1], 2.0 * e0, l3, x[2] / x[3]],
        [c2, l3, -x[0] * s2, x[1] / x[3]],
        [0.0, x[2] / x[3], x[1] / x[3], -x[1] * x[2] / (x[3] * x[3])],
    ];
    let h = landscape::hessian(&f, &x, h_rel, None).map_err(|e| e.to_string())?;
    let g = landscape::gradient(&f, &x, h_rel, None).map_err(|e| e.to_string())?;
    let scale = hess.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..4 {
        ensure!(rel_close(g[i], grad[i], 1e-4), "gradient[{i}] = {} want {}", g[i], grad[i]);
        for j in 0..4 {
            let want = hess[i][j];
            let ok = if want == 0.0 { h.get(i, j).abs() <= 1e-4 * scale } else { rel_close(h.get(i, j), want, 1e-4) };
            ensure!(ok, "H[{i}][{j}] = {} want {want}", h.get(i, j));
            ensure!(h.get(i, j).to_bits() == h.get(j, i).to_bits(), "H not symmetric at ({i}, {j})");
        }
    }

    // the interaction split adds up
    for _ in 0..200 {
        let n = rng.gen_range(1..=6);
        let mut hm = landscape::HessianMatrix {
            indices: (0..n).collect(),
            delta: vec![1.0; n],
            steps: vec![0.01; n],
            values: vec![vec![0.0; n]; n],
        };
        for i in 0..n {
            for j in 0..=i {
                let v = rng.gen_range(-50.0..50.0);
                hm.values[i][j] = v;
                hm.values[j][i] = v;
            }
        }
        let eps: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = landscape::qit(&hm, &eps).map_err(|e| e.to_string())?;
        let (d, c) = landscape::qit_split(&hm, &eps).map_err(|e| e.to_string())?;
        ensure!((d + c - q).abs() <= 1e-12 * q.abs().max(1.0), "qit {q} vs split {d} + {c}");
    }
    Ok("analytic Hessians and gradients within 1e-4, exact symmetry, qit split sums".into())
}

// ---------------------------------------------------------------- bias correction

fn channel_means(t: &Tensor) -> Vec<f64> {
    let rows = t.shape()[0];
    let per = t.len() / rows;
    t.data().chunks(per).map(|c| c.iter().sum::<f64>() / per as f64).collect()
}

fn bias_correction() -> Check {
    let mut worst: f64 = 0.0;
    for name in FIXTURES {
        let fx = fixture(name);
        let r = lapq_run(fx, 4, 4);
        let corrected = quantized(fx, &settings(4, 4)).with_bias_correction(BiasCorrection::Mean);
        let weights = corrected.effective_weights(&r.delta_star).unwrap();
        for (layer, wq) in weights.iter().enumerate() {
            let (Some(wq), Some(w)) = (wq, fx.model.layers()[layer].weights.as_ref()) else { continue };
            for (m, mq) in channel_means(w).iter().zip(channel_means(wq)) {
                worst = worst.max((m - mq).abs());
                ensure!((m - mq).abs() <= 1e-12, "{name} layer {layer}: channel mean {mq} vs {m}");
            }
        }
    }

    // accuracy direction with 4-bit weights and full-precision activations
    let fx = fixture("cnn");
    let r = lapq_run(fx, 4, 32);
    let plain = quantized(fx, &settings(4, 32));
    let without = plain.accuracy(&fx.test, &r.delta_star).unwrap();
    let with = plain
        .with_bias_correction(BiasCorrection::Mean)
        .accuracy(&fx.test, &r.delta_star)
        .unwrap();
    ensure!(with >= without, "cnn W4/A32: accuracy with correction {with} < without {without}");
    Ok(format!("worst channel-mean gap {worst:.1e}; cnn W4/A32 {with:.4} vs {without:.4}"))
}

// ---------------------------------------------------------------- determinism

fn qtk_output(threads: Option<&str>, env_threads: Option<&str>, args: &[String]) -> std::result::Result<Vec<u8>, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qtk"));
    cmd.env_remove("QTK_THREADS");
    if let Some(t) = env_threads {
        cmd.env("QTK_THREADS", t);
    }
    if let Some(t) = threads {
        cmd.args(["--threads", t]);
    }
    let o = cmd.args(args).output().map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(String::from_utf8_lossy(&o.stderr).into_owned());
    }
    Ok(o.stdout)
}

fn determinism() -> Check {
    let mut checked = Vec::new();
    for (name, command, extra) in [
        ("mlp", "calibrate", vec![]),
        ("cnn", "calibrate", vec!["--max-outer", "1", "--calib-size", "200"]),
        ("cnn", "hessian", vec!["--calib-size", "200"]),
    ] {
        let dir = fixture_dir(name);
        let mut args = vec![command.to_string()];
        for (flag, file) in [("--model", "model.json"), ("--calib", "calib_x.qtn"), ("--labels", "calib_y.qtn")] {
            args.push(flag.into());
            args.push(dir.join(file).to_string_lossy().into());
        }
        args.extend(extra.iter().map(|s| s.to_string()));
        let runs = [
            qtk_output(Some("1"), None, &args)?,
            qtk_output(Some("1"), None, &args)?,
            qtk_output(Some("4"), None, &args)?,
            qtk_output(None, Some("2"), &args)?,
            qtk_output(None, None, &args)?,
        ];
        ensure!(runs.iter().all(|r| r == &runs[0]), "{name} {command}: outputs differ across runs");
        checked.push(format!("{name} {command}"));
    }
    Ok(format!("bit-identical over 5 runs each: {}", checked.join(", ")))
}

// ---------------------------------------------------------------- gate

#[test]
fn primary_criteria() {
    let criteria: Vec<(&str, Option<u64>, fn() -> Check)> = vec![
        ("quantizer suite", Some(5), quantizer_suite),
        ("Lp calibration oracle", Some(60), lp_calibration_oracle),
        ("Powell correctness", Some(10), powell_correctness),
        ("quadratic approximation", Some(1), quadratic_approximation),
        ("end-to-end dominance", Some(300), end_to_end_dominance),
        ("8-bit near-losslessness", Some(60), eight_bit),
        ("curvature ordering", Some(300), curvature_ordering),
        ("finite-difference validation", None, finite_differences),
        ("bias correction", None, bias_correction),
        ("determinism", None, determinism),
    ];
    let mut failed = Vec::new();
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(d), Some(b)) if elapsed > Duration::from_secs(b) => Err(format!("over the {b} s budget; {d}")),
            (o, _) => o,
        };
        let limit = budget.map(|b| format!(" / {b} s")).unwrap_or_default();
        match outcome {
            Ok(detail) => println!("PASS {name} ({:.1} s{limit}): {detail}", elapsed.as_secs_f64()),
            Err(detail) => {
                println!("FAIL {name} ({:.1} s{limit}): {detail}", elapsed.as_secs_f64());
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
