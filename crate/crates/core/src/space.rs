//! The binary interpretable space shared across modalities.
//!
//! Every interpretable unit (superpixel, token, field, window) gets one
//! global index; indices are contiguous per modality in declaration order.
//! A perturbation is a binary mask over those indices: 1 keeps the unit,
//! 0 asks the endpoint to substitute its baseline content.

use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpaceError {
    #[error("instance spec needs at least one modality")]
    EmptySpec,
    #[error("modality `{0}` has a non-positive unit count")]
    NonPositiveCount(String),
    #[error("duplicate modality name `{0}`")]
    DuplicateModalityName(String),
    #[error("modality names and unit counts have different lengths ({names} vs {counts})")]
    LengthMismatch { names: usize, counts: usize },
}

/// Interpretable layout of one instance: named modalities, per-modality unit
/// counts, and the contiguous global index block of each modality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceSpec {
    modality_names: Vec<String>,
    unit_counts: Vec<usize>,
    total_units: usize,
    group_offsets: Vec<usize>,
}

impl InstanceSpec {
    /// Builds a spec, assigning global indices contiguously per modality in
    /// the order given.
    pub fn new<S: Into<String>>(names: Vec<S>, unit_counts: Vec<usize>) -> Result<Self, SpaceError> {
        let modality_names: Vec<String> = names.into_iter().map(Into::into).collect();
        if modality_names.len() != unit_counts.len() {
            return Err(SpaceError::LengthMismatch {
                names: modality_names.len(),
                counts: unit_counts.len(),
            });
        }
        if modality_names.is_empty() {
            return Err(SpaceError::EmptySpec);
        }
        for (name, &count) in modality_names.iter().zip(&unit_counts) {
            if count == 0 {
                return Err(SpaceError::NonPositiveCount(name.clone()));
            }
        }
        for (i, name) in modality_names.iter().enumerate() {
            if modality_names[..i].contains(name) {
                return Err(SpaceError::DuplicateModalityName(name.clone()));
            }
        }
        let mut group_offsets = Vec::with_capacity(unit_counts.len() + 1);
        let mut acc = 0usize;
        group_offsets.push(0);
        for &count in &unit_counts {
            acc += count;
            group_offsets.push(acc);
        }
        Ok(Self {
            modality_names,
            unit_counts,
            total_units: acc,
            group_offsets,
        })
    }

    pub fn modality_names(&self) -> &[String] {
        &self.modality_names
    }

    pub fn unit_counts(&self) -> &[usize] {
        &self.unit_counts
    }

    /// Number of modalities M.
    pub fn num_modalities(&self) -> usize {
        self.modality_names.len()
    }

    /// Total number of units K across all modalities.
    pub fn total_units(&self) -> usize {
        self.total_units
    }

    /// Global index range of modality `m`.
    pub fn group(&self, m: usize) -> Range<usize> {
        self.group_offsets[m]..self.group_offsets[m + 1]
    }

    /// Iterator over all modality index ranges, in declaration order.
    pub fn groups(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.num_modalities()).map(|m| self.group(m))
    }

    /// Modality that owns global unit index `j`.
    pub fn modality_of(&self, j: usize) -> usize {
        debug_assert!(j < self.total_units);
        match self.group_offsets.binary_search(&j) {
            Ok(m) if m < self.num_modalities() => m,
            Ok(m) => m - 1,
            Err(m) => m - 1,
        }
    }

    /// Index of the modality named `name`, if any.
    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modality_names.iter().position(|n| n == name)
    }
}

/// JSON form: `{"modalities":[{"name":"image","units":5},...]}`.
#[derive(Debug, Serialize, Deserialize)]
struct SpecJson {
    modalities: Vec<ModalityJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModalityJson {
    name: String,
    units: usize,
}

impl Serialize for InstanceSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let json = SpecJson {
            modalities: self
                .modality_names
                .iter()
                .zip(&self.unit_counts)
                .map(|(name, &units)| ModalityJson {
                    name: name.clone(),
                    units,
                })
                .collect(),
        };
        json.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for InstanceSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let json = SpecJson::deserialize(deserializer)?;
        let (names, counts): (Vec<String>, Vec<usize>) = json
            .modalities
            .into_iter()
            .map(|m| (m.name, m.units))
            .unzip();
        InstanceSpec::new(names, counts).map_err(serde::de::Error::custom)
    }
}

/// Binary mask over all units: 1 = unit present, 0 = replaced by baseline.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskVector {
    bits: Vec<u8>,
}

impl MaskVector {
    pub fn new(bits: Vec<u8>) -> Self {
        debug_assert!(bits.iter().all(|&b| b <= 1));
        Self { bits }
    }

    /// The all-ones reference mask for `spec`.
    pub fn full(spec: &InstanceSpec) -> Self {
        Self {
            bits: vec![1; spec.total_units()],
        }
    }

    pub fn zeros(spec: &InstanceSpec) -> Self {
        Self {
            bits: vec![0; spec.total_units()],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, j: usize) -> u8 {
        self.bits[j]
    }

    pub fn set(&mut self, j: usize, value: u8) {
        debug_assert!(value <= 1);
        self.bits[j] = value;
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b == 1)
    }

    /// Compact string form, e.g. `"10110"`; used by dataset artifacts.
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str) -> Option<Self> {
        let mut bits = Vec::with_capacity(s.len());
        for c in s.chars() {
            match c {
                '0' => bits.push(0),
                '1' => bits.push(1),
                _ => return None,
            }
        }
        Some(Self { bits })
    }
}

/// Builds an [`InstanceSpec`] from modality names and unit counts.
pub fn build_instance_spec(
    modality_names: Vec<String>,
    unit_counts: Vec<usize>,
) -> Result<InstanceSpec, SpaceError> {
    InstanceSpec::new(modality_names, unit_counts)
}

/// The all-ones reference mask for `spec`.
pub fn full_mask(spec: &InstanceSpec) -> MaskVector {
    MaskVector::full(spec)
}
