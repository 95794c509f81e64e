//! Step vectors: the flat list of step sizes `(Δ₁, …, Δₙ)` that the
//! optimizer moves, and the layout that says which tensor each entry
//! quantizes.
//!
//! Order is fixed: all weight steps in layer order, then all activation
//! steps in layer order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{check_bits, QuantParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Weight,
    Activation,
}

/// One quantization point in a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub layer: usize,
    pub kind: SlotKind,
    pub bits: u8,
}

impl Slot {
    /// Weights are quantized on a signed grid, post-ReLU activations on an
    /// unsigned one.
    pub fn signed(&self) -> bool {
        self.kind == SlotKind::Weight
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepLayout {
    slots: Vec<Slot>,
}

impl StepLayout {
    pub fn new(slots: Vec<Slot>) -> Result<Self> {
        for w in slots.windows(2) {
            let ordered = match (w[0].kind, w[1].kind) {
                (SlotKind::Weight, SlotKind::Activation) => true,
                (SlotKind::Activation, SlotKind::Weight) => false,
                _ => w[0].layer < w[1].layer,
            };
            if !ordered {
                return Err(Error::Model(format!(
                    "slots out of order: {:?} before {:?}",
                    w[0], w[1]
                )));
            }
        }
        for s in &slots {
            check_bits(s.bits)?;
        }
        Ok(StepLayout { slots })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn weight_indices(&self) -> Vec<usize> {
        self.indices_of(SlotKind::Weight)
    }

    pub fn activation_indices(&self) -> Vec<usize> {
        self.indices_of(SlotKind::Activation)
    }

    fn indices_of(&self, kind: SlotKind) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn check(&self, steps: &StepVector) -> Result<()> {
        if steps.len() != self.len() {
            return Err(Error::StepLength {
                expected: self.len(),
                got: steps.len(),
            });
        }
        Ok(())
    }

    pub fn params(&self, steps: &StepVector) -> Result<Vec<QuantParams>> {
        self.check(steps)?;
        self.slots
            .iter()
            .zip(steps.iter())
            .map(|(s, &d)| QuantParams::new(d, s.bits, s.signed()))
            .collect()
    }

    pub fn to_entries(&self, steps: &StepVector) -> Result<Vec<StepEntry>> {
        self.check(steps)?;
        Ok(self
            .slots
            .iter()
            .zip(steps.iter())
            .map(|(s, &delta)| StepEntry {
                layer: s.layer,
                kind: s.kind,
                delta,
                bits: s.bits,
            })
            .collect())
    }

    /// Rebuilds a step vector from named entries, checking that they describe
    /// exactly this layout.
    pub fn from_entries(&self, entries: &[StepEntry]) -> Result<StepVector> {
        if entries.len() != self.len() {
            return Err(Error::StepLength {
                expected: self.len(),
                got: entries.len(),
            });
        }
        for (s, e) in self.slots.iter().zip(entries) {
            if s.layer != e.layer || s.kind != e.kind || s.bits != e.bits {
                return Err(Error::Model(format!(
                    "step entry {{layer {}, {:?}, {} bits}} does not match model slot {{layer {}, {:?}, {} bits}}",
                    e.layer, e.kind, e.bits, s.layer, s.kind, s.bits
                )));
            }
        }
        Ok(StepVector::new(entries.iter().map(|e| e.delta).collect()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StepVector(Vec<f64>);

impl StepVector {
    pub fn new(values: Vec<f64>) -> Self {
        StepVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn all_positive(&self) -> bool {
        self.0.iter().all(|&d| d.is_finite() && d > 0.0)
    }
}

impl From<Vec<f64>> for StepVector {
    fn from(v: Vec<f64>) -> Self {
        StepVector(v)
    }
}

impl std::ops::Index<usize> for StepVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for StepVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Serialized form of one step-vector entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepEntry {
    pub layer: usize,
    pub kind: SlotKind,
    pub delta: f64,
    pub bits: u8,
}

impl StepEntry {
    pub fn validate(&self) -> Result<()> {
        QuantParams::new(self.delta, self.bits, self.kind == SlotKind::Weight).map(|_| ())
    }
}

/// Parses a JSON array of step entries and validates every value.
pub fn parse_entries(json: &str) -> Result<Vec<StepEntry>> {
    let entries: Vec<StepEntry> =
        serde_json::from_str(json).map_err(|e| Error::Parse(e.to_string()))?;
    for e in &entries {
        e.validate()?;
    }
    Ok(entries)
}
