//! Run settings. Each value comes from the first of: command-line flag,
//! settings embedded in a step file, `--config` JSON file, built-in default.

use serde::{Deserialize, Serialize};

use qtk_core::calib::DEFAULT_P_GRID;
use qtk_core::landscape::DEFAULT_H_REL;
use qtk_core::lapq::{LapqConfig, Phase};
use qtk_core::powell::PowellConfig;
use qtk_core::{BiasCorrection, Error, QuantConfig, Result};

/// Bit width that means "leave at full precision".
pub const FULL_PRECISION_BITS: u8 = 32;
pub const DEFAULT_CALIB_SIZE: usize = 512;
pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_SEED: u64 = 0;

/// Partial settings, as read from a config file or collected from flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialSettings {
    pub wbits: Option<u8>,
    pub abits: Option<u8>,
    pub skip_first_last: Option<bool>,
    pub bias_correct: Option<BiasCorrection>,
    pub p_grid: Option<Vec<f64>>,
    pub phase: Option<Phase>,
    pub p: Option<f64>,
    pub max_outer: Option<usize>,
    pub ftol: Option<f64>,
    pub calib_size: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub h_rel: Option<f64>,
}

impl PartialSettings {
    /// Fills every unset field from `lower`.
    pub fn or(self, lower: PartialSettings) -> PartialSettings {
        PartialSettings {
            wbits: self.wbits.or(lower.wbits),
            abits: self.abits.or(lower.abits),
            skip_first_last: self.skip_first_last.or(lower.skip_first_last),
            bias_correct: self.bias_correct.or(lower.bias_correct),
            p_grid: self.p_grid.or(lower.p_grid),
            phase: self.phase.or(lower.phase),
            p: self.p.or(lower.p),
            max_outer: self.max_outer.or(lower.max_outer),
            ftol: self.ftol.or(lower.ftol),
            calib_size: self.calib_size.or(lower.calib_size),
            batch_size: self.batch_size.or(lower.batch_size),
            seed: self.seed.or(lower.seed),
            h_rel: self.h_rel.or(lower.h_rel),
        }
    }
}

/// Parses a `--config` file body.
pub fn parse_config(json: &str) -> Result<PartialSettings> {
    let s: PartialSettings = serde_json::from_str(json).map_err(|e| Error::Parse(e.to_string()))?;
    // validate what is set, so a bad file fails on load rather than mid-run
    s.clone().or(Settings::default().into()).resolve()?;
    Ok(s)
}

/// Fully resolved settings, echoed into every result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub wbits: u8,
    pub abits: u8,
    pub skip_first_last: bool,
    pub bias_correct: BiasCorrection,
    pub p_grid: Vec<f64>,
    pub phase: Phase,
    pub p: f64,
    pub max_outer: usize,
    pub ftol: f64,
    pub calib_size: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub h_rel: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let powell = PowellConfig::default();
        Settings {
            wbits: 4,
            abits: 4,
            skip_first_last: true,
            bias_correct: BiasCorrection::None,
            p_grid: DEFAULT_P_GRID.to_vec(),
            phase: Phase::Full,
            p: 2.0,
            max_outer: powell.max_outer,
            ftol: powell.ftol,
            calib_size: DEFAULT_CALIB_SIZE,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: DEFAULT_SEED,
            h_rel: DEFAULT_H_REL,
        }
    }
}

impl From<Settings> for PartialSettings {
    fn from(s: Settings) -> Self {
        PartialSettings {
            wbits: Some(s.wbits),
            abits: Some(s.abits),
            skip_first_last: Some(s.skip_first_last),
            bias_correct: Some(s.bias_correct),
            p_grid: Some(s.p_grid),
            phase: Some(s.phase),
            p: Some(s.p),
            max_outer: Some(s.max_outer),
            ftol: Some(s.ftol),
            calib_size: Some(s.calib_size),
            batch_size: Some(s.batch_size),
            seed: Some(s.seed),
            h_rel: Some(s.h_rel),
        }
    }
}

fn bits(value: u8, what: &str) -> Result<Option<u8>> {
    match value {
        FULL_PRECISION_BITS => Ok(None),
        2..=8 => Ok(Some(value)),
        _ => Err(Error::InvalidArgument(format!(
            "{what} must be 2..=8, or {FULL_PRECISION_BITS} for full precision, got {value}"
        ))),
    }
}

impl PartialSettings {
    /// Applies defaults and validates.
    pub fn resolve(self) -> Result<Settings> {
        let d = Settings::default();
        let s = Settings {
            wbits: self.wbits.unwrap_or(d.wbits),
            abits: self.abits.unwrap_or(d.abits),
            skip_first_last: self.skip_first_last.unwrap_or(d.skip_first_last),
            bias_correct: self.bias_correct.unwrap_or(d.bias_correct),
            p_grid: self.p_grid.unwrap_or(d.p_grid),
            phase: self.phase.unwrap_or(d.phase),
            p: self.p.unwrap_or(d.p),
            max_outer: self.max_outer.unwrap_or(d.max_outer),
            ftol: self.ftol.unwrap_or(d.ftol),
            calib_size: self.calib_size.unwrap_or(d.calib_size),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed: self.seed.unwrap_or(d.seed),
            h_rel: self.h_rel.unwrap_or(d.h_rel),
        };
        s.validate()?;
        Ok(s)
    }
}

impl Settings {
    pub fn validate(&self) -> Result<()> {
        bits(self.wbits, "wbits")?;
        bits(self.abits, "abits")?;
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if let Some(&p) = self.p_grid.iter().chain([&self.p]).find(|p| !(**p >= 1.0 && p.is_finite())) {
            return bad(format!("p must be a finite value >= 1, got {p}"));
        }
        if self.phase != Phase::Lw {
            let mut ps = self.p_grid.clone();
            ps.sort_by(f64::total_cmp);
            ps.dedup();
            if ps.len() < 3 {
                return bad(format!("p grid needs at least 3 distinct values, got {:?}", self.p_grid));
            }
        }
        if !(self.ftol >= 0.0 && self.ftol.is_finite()) {
            return bad(format!("ftol must be finite and non-negative, got {}", self.ftol));
        }
        if self.calib_size == 0 {
            return bad("calib_size must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.h_rel > 0.0 && self.h_rel < 0.5) {
            return bad(format!("h_rel must lie in (0, 0.5), got {}", self.h_rel));
        }
        Ok(())
    }

    pub fn quant_config(&self) -> QuantConfig {
        QuantConfig {
            weight_bits: bits(self.wbits, "wbits").expect("validated"),
            act_bits: bits(self.abits, "abits").expect("validated"),
            skip_first_last: self.skip_first_last,
            bias_correction: self.bias_correct,
        }
    }

    pub fn lapq_config(&self) -> LapqConfig {
        LapqConfig {
            p_grid: self.p_grid.clone(),
            phase: self.phase,
            lw_p: self.p,
            powell: PowellConfig {
                max_outer: self.max_outer,
                ftol: self.ftol,
                ..PowellConfig::default()
            },
        }
    }
}
