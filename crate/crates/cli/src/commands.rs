use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use qtk_core::calib::calibrate_model;
use qtk_core::landscape::{self, Curvature, GridScan};
use qtk_core::lapq::{lapq, LapqResult};
use qtk_core::steps::parse_entries;
use qtk_core::{BiasCorrection, CalibSet, Error, Evaluation, Model, QuantizedModel, Result, StepEntry, StepVector};

use crate::cli::{
    CalibrateArgs, DataArgs, EvalArgs, HessianArgs, LandscapeArgs, QuantizeArgs, SettingsArgs, SweepArgs,
};
use crate::config::{parse_config, PartialSettings, Settings};

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

/// Writes to `out`, or prints when there is none.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    }
}

/// Flags over `middle` over the `--config` file over defaults.
fn settings(args: &SettingsArgs, middle: PartialSettings) -> Result<Settings> {
    let file = match &args.config {
        Some(p) => parse_config(&read_text(p)?).map_err(|e| with_path(p, e))?,
        None => PartialSettings::default(),
    };
    args.flags().or(middle).or(file).resolve()
}

/// A stored step vector: either a full calibrate result or bare entries.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum StepsFile {
    Result { config: Settings, steps: Vec<StepEntry> },
    Entries(Vec<StepEntry>),
}

pub struct LoadedSteps {
    pub entries: Vec<StepEntry>,
    /// Quantization settings the steps were produced with, if recorded.
    pub quant: PartialSettings,
}

/// Parses a `--steps` file body: bare entries or a calibrate result.
pub fn parse_steps(text: &str) -> Result<LoadedSteps> {
    let file: StepsFile = serde_json::from_str(text).map_err(|_| {
        // re-parse as a plain list for a more specific message
        match parse_entries(text) {
            Err(e) => e,
            Ok(_) => Error::Parse("not a step list or calibrate result".into()),
        }
    })?;
    let (entries, quant) = match file {
        StepsFile::Result { config, steps } => (
            steps,
            PartialSettings {
                wbits: Some(config.wbits),
                abits: Some(config.abits),
                skip_first_last: Some(config.skip_first_last),
                bias_correct: Some(config.bias_correct),
                ..Default::default()
            },
        ),
        StepsFile::Entries(e) => (e, PartialSettings::default()),
    };
    for e in &entries {
        e.validate()?;
    }
    Ok(LoadedSteps { entries, quant })
}

fn load_steps(path: &Path) -> Result<LoadedSteps> {
    parse_steps(&read_text(path)?).map_err(|e| with_path(path, e))
}

fn load_model(path: &Path) -> Result<Arc<Model>> {
    Model::load(path).map(Arc::new)
}

fn load_set(inputs: &Path, labels: &Path, batch_size: usize) -> Result<CalibSet> {
    CalibSet::load(inputs, labels, batch_size)
}

/// Seeded sample of `size` distinct samples, in ascending index order, or
/// the whole set when it is not larger than `size`.
pub fn subset(set: &CalibSet, size: usize, seed: u64) -> Result<CalibSet> {
    if set.len() <= size {
        return Ok(set.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, set.len(), size).into_vec();
    idx.sort_unstable();
    set.select(&idx)
}

fn calib_set(data: &DataArgs, s: &Settings) -> Result<CalibSet> {
    subset(&load_set(&data.calib, &data.labels, s.batch_size)?, s.calib_size, s.seed)
}

/// Layer-wise calibration keeps bias correction off; it is applied once the
/// steps are fixed.
fn search_model(model: Arc<Model>, s: &Settings) -> Result<QuantizedModel> {
    QuantizedModel::new(model, s.quant_config()).map(|q| q.with_bias_correction(BiasCorrection::None))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateReport {
    pub command: String,
    pub config: Settings,
    pub model: String,
    pub calib_samples: usize,
    pub steps: Vec<StepEntry>,
    pub lapq: LapqResult,
    /// Calibration-set loss and accuracy of the final model (with bias
    /// correction, if enabled).
    pub calib: Evaluation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<Evaluation>,
}

pub fn calibrate_report(args: &CalibrateArgs) -> Result<CalibrateReport> {
    let s = settings(&args.settings, PartialSettings::default())?;
    let model = load_model(&args.data.model)?;
    let calib = calib_set(&args.data, &s)?;
    let test = match (&args.test, &args.test_labels) {
        (Some(x), Some(y)) => Some(load_set(x, y, s.batch_size)?),
        _ => None,
    };
    let search = search_model(Arc::clone(&model), &s)?;
    let mut result = lapq(&search, &calib, &s.lapq_config())?;
    if !args.timings {
        result.timings = None;
    }
    let fin = search.with_bias_correction(s.bias_correct);
    let steps = fin.layout().to_entries(&result.delta_star)?;
    Ok(CalibrateReport {
        command: "calibrate".into(),
        calib_samples: calib.len(),
        model: model.name.clone(),
        steps,
        calib: fin.evaluate(&calib, &result.delta_star)?,
        test: test.map(|t| fin.evaluate(&t, &result.delta_star)).transpose()?,
        lapq: result,
        config: s,
    })
}

pub fn calibrate(args: &CalibrateArgs) -> Result<()> {
    let report = calibrate_report(args)?;
    if let Some(p) = &args.steps_out {
        write_text(p, &to_json(&report.steps))?;
    }
    emit(args.out.as_deref(), &to_json(&report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub command: String,
    pub config: Settings,
    #[serde(flatten)]
    pub evaluation: Evaluation,
}

/// The quantized model a step file belongs to, and its step vector.
fn stored_point(
    model_path: &Path,
    steps_path: &Path,
    args: &SettingsArgs,
) -> Result<(Settings, QuantizedModel, StepVector)> {
    let loaded = load_steps(steps_path)?;
    let s = settings(args, loaded.quant)?;
    let q = QuantizedModel::new(load_model(model_path)?, s.quant_config())?;
    let steps = q.layout().from_entries(&loaded.entries)?;
    Ok((s, q, steps))
}

pub fn eval_report(args: &EvalArgs) -> Result<EvalReport> {
    let (s, q, steps) = stored_point(&args.model, &args.steps, &args.settings)?;
    let data = load_set(&args.data, &args.labels, s.batch_size)?;
    Ok(EvalReport {
        command: "eval".into(),
        evaluation: q.evaluate(&data, &steps)?,
        config: s,
    })
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let r = eval_report(args)?;
    let line = serde_json::to_string(&r).expect("report serializes") + "\n";
    emit(args.out.as_deref(), &line)
}

/// The base point for the diagnostics: stored steps, or layer-wise
/// calibration at `p`.
fn base_point(
    data: &DataArgs,
    steps: Option<&PathBuf>,
    args: &SettingsArgs,
) -> Result<(Settings, QuantizedModel, CalibSet, StepVector)> {
    let (s, q, delta) = match steps {
        Some(path) => {
            let (s, q, delta) = stored_point(&data.model, path, args)?;
            (s, q, Some(delta))
        }
        None => {
            let s = settings(args, PartialSettings::default())?;
            let q = QuantizedModel::new(load_model(&data.model)?, s.quant_config())?;
            (s, q, None)
        }
    };
    let calib = calib_set(data, &s)?;
    let delta = match delta {
        Some(d) => d,
        None => calibrate_model(&q.with_bias_correction(BiasCorrection::None), &calib, s.p)?,
    };
    if delta.is_empty() {
        return Err(Error::InvalidArgument(
            "nothing is quantized, so there are no step sizes to analyse".into(),
        ));
    }
    Ok((s, q, calib, delta))
}

pub fn landscape_scan(args: &LandscapeArgs) -> Result<GridScan> {
    if args.resolution < 2 {
        return Err(Error::InvalidArgument("resolution must be at least 2".into()));
    }
    if !(args.span > 0.0 && args.span < 1.0) {
        return Err(Error::InvalidArgument(format!("span must lie in (0, 1), got {}", args.span)));
    }
    let (_, q, calib, delta) = base_point(&args.data, args.steps.as_ref(), &args.settings)?;
    for i in [args.i, args.j] {
        if i >= delta.len() {
            return Err(Error::InvalidArgument(format!(
                "step index {i} out of range for {} steps",
                delta.len()
            )));
        }
    }
    let vi = landscape::relative_axis(delta[args.i], args.span, args.resolution);
    let vj = landscape::relative_axis(delta[args.j], args.span, args.resolution);
    let f = landscape::model_loss(&q, &calib);
    landscape::grid_scan(&f, delta.as_slice(), args.i, args.j, &vi, &vj)
}

pub fn landscape(args: &LandscapeArgs) -> Result<()> {
    let grid = landscape_scan(args)?;
    emit(args.out.as_deref(), &grid.to_csv())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub command: String,
    pub config: Settings,
    pub delta: StepVector,
    pub indices: Vec<usize>,
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub curvature: Curvature,
    pub offdiag_ratio: f64,
    pub offdiag_mass_ratio: f64,
    /// `εᵀHε` for `ε = Δ/2` over the selected steps.
    pub qit: f64,
    pub qit_diagonal: f64,
    pub qit_cross: f64,
    pub hessian: Vec<Vec<f64>>,
}

pub fn hessian_report(args: &HessianArgs) -> Result<HessianReport> {
    let (s, q, calib, delta) = base_point(&args.data, args.steps.as_ref(), &args.settings)?;
    let indices = match &args.indices {
        Some(i) => i.clone(),
        None => q.layout().weight_indices(),
    };
    if indices.is_empty() {
        return Err(Error::InvalidArgument(
            "no weight steps to differentiate; pass --indices".into(),
        ));
    }
    let f = landscape::model_loss(&q, &calib);
    let h = landscape::hessian(&f, delta.as_slice(), s.h_rel, Some(&indices))?;
    let g = landscape::gradient(&f, delta.as_slice(), s.h_rel, Some(&indices))?;
    let curvature = landscape::curvature(&h.values, &g)?;
    let eps: Vec<f64> = indices.iter().map(|&i| delta[i] / 2.0).collect();
    let (qit_diagonal, qit_cross) = landscape::qit_split(&h, &eps)?;
    Ok(HessianReport {
        command: "hessian".into(),
        loss: f(delta.as_slice())?,
        offdiag_ratio: h.offdiag_ratio(),
        offdiag_mass_ratio: h.offdiag_mass_ratio(),
        qit: landscape::qit(&h, &eps)?,
        qit_diagonal,
        qit_cross,
        gradient: g,
        curvature,
        hessian: h.values,
        indices,
        delta,
        config: s,
    })
}

pub fn hessian(args: &HessianArgs) -> Result<()> {
    let r = hessian_report(args)?;
    let summary = to_json(&r);
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        let h = landscape::HessianMatrix {
            indices: r.indices.clone(),
            delta: r.delta.as_slice().to_vec(),
            steps: r.indices.iter().map(|&i| r.config.h_rel * r.delta[i]).collect(),
            values: r.hessian.clone(),
        };
        write_text(&dir.join("hessian.csv"), &h.to_csv())?;
        write_text(
            &dir.join("gradient.csv"),
            &landscape::gradient_csv(&r.indices, r.delta.as_slice(), &r.gradient),
        )?;
        write_text(&dir.join("summary.json"), &summary)?;
    }
    print!("{summary}");
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub calib_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub command: String,
    pub config: Settings,
    pub rows: Vec<SweepRow>,
}

/// Sorted, de-duplicated sizes, each within `1..=n`.
pub fn sweep_sizes(requested: Option<&[usize]>, n: usize) -> Result<Vec<usize>> {
    let mut sizes = match requested {
        Some(s) => s.to_vec(),
        None => {
            let mut v: Vec<usize> = std::iter::successors(Some(32usize), |s| s.checked_mul(2))
                .take_while(|&s| s < n)
                .collect();
            v.push(n);
            v
        }
    };
    if let Some(&bad) = sizes.iter().find(|&&s| s == 0 || s > n) {
        return Err(Error::InvalidArgument(format!(
            "calibration size {bad} must lie in 1..={n}"
        )));
    }
    sizes.sort_unstable();
    sizes.dedup();
    Ok(sizes)
}

pub fn sweep_report(args: &SweepArgs) -> Result<SweepReport> {
    let s = settings(&args.settings, PartialSettings::default())?;
    let model = load_model(&args.data.model)?;
    let full = load_set(&args.data.calib, &args.data.labels, s.batch_size)?;
    let test = load_set(&args.test, &args.test_labels, s.batch_size)?;
    let search = search_model(model, &s)?;
    let fin = search.with_bias_correction(s.bias_correct);
    let mut rows = Vec::new();
    for size in sweep_sizes(args.sizes.as_deref(), full.len())? {
        let calib = subset(&full, size, s.seed)?;
        let r = lapq(&search, &calib, &s.lapq_config())?;
        let t = fin.evaluate(&test, &r.delta_star)?;
        rows.push(SweepRow {
            size,
            calib_loss: fin.loss(&calib, &r.delta_star)?,
            test_loss: t.loss,
            test_accuracy: t.accuracy,
        });
    }
    Ok(SweepReport {
        command: "sweep-calib-size".into(),
        config: s,
        rows,
    })
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let r = sweep_report(args)?;
    emit(args.out.as_deref(), &to_json(&r))
}

/// Writes the model with quantized (and possibly corrected) weights and the
/// step entries next to it. Returns the manifest path.
pub fn quantize(args: &QuantizeArgs) -> Result<PathBuf> {
    let (_, q, steps) = stored_point(&args.model, &args.steps, &args.settings)?;
    let weights = q.effective_weights(&steps)?;
    let layers = q
        .model()
        .layers()
        .iter()
        .zip(weights)
        .map(|(l, w)| {
            let mut l = l.clone();
            l.weights = w;
            l
        })
        .collect();
    let snapped = q.model().with_layers(layers)?;
    let path = snapped.save(&args.out_dir)?;
    write_text(&args.out_dir.join("steps.json"), &to_json(&q.layout().to_entries(&steps)?))?;
    Ok(path)
}
