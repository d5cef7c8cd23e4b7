//! Trait ontology: identifiers, clinical-significance tiers, anatomic groups,
//! and the tier-masked training targets derived from them.
//!
//! Traits are *not* mutually exclusive; a study may carry any subset. When a
//! higher-risk trait is present, lower-risk *positive* labels are dropped from
//! the loss (weight 0) so the optimizer is never penalized for attending to
//! the dangerous finding. Negatives always keep weight 1.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeded::fnv1a64;

/// Clinical-significance tier, ordered by patient risk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    ZeroRisk,
    ModerateRisk,
    HighRisk,
}

impl Tier {
    fn file_token(self) -> &'static str {
        match self {
            Tier::ZeroRisk => "zero",
            Tier::ModerateRisk => "moderate",
            Tier::HighRisk => "high",
        }
    }

    fn from_file_token(tok: &str) -> Option<Self> {
        match tok {
            "zero" => Some(Tier::ZeroRisk),
            "moderate" => Some(Tier::ModerateRisk),
            "high" => Some(Tier::HighRisk),
            _ => None,
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_token())
    }
}

/// One phenomenological trait of the ontology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraitDef {
    /// Dense index in `0..K`.
    pub id: usize,
    pub name: String,
    pub tier: Tier,
    /// Anatomical/type group; every trait belongs to exactly one.
    pub group: String,
    /// Clinically significant findings; only valid on `HighRisk` traits.
    pub significant: bool,
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("trait ids must be dense and unique in 0..K (got {0} traits)")]
    NonDenseIds(usize),
    #[error("significant trait `{0}` is not HighRisk")]
    SignificantBelowHighRisk(String),
    #[error("taxonomy has no clinically significant traits")]
    NoSignificantTraits,
    #[error("label vector has length {got}, taxonomy has {expected} traits")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label vector entry {index} = {value} is not binary")]
    NonBinaryLabel { index: usize, value: f32 },
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("taxonomy file line {line}: {msg}")]
    File { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The fixed trait ontology. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    traits: Vec<TraitDef>,
}

impl Taxonomy {
    pub fn new(traits: Vec<TraitDef>) -> Result<Self, TaxonomyError> {
        let k = traits.len();
        let mut seen = vec![false; k];
        for t in &traits {
            if t.id >= k || seen[t.id] {
                return Err(TaxonomyError::NonDenseIds(k));
            }
            seen[t.id] = true;
            if t.significant && t.tier != Tier::HighRisk {
                return Err(TaxonomyError::SignificantBelowHighRisk(t.name.clone()));
            }
        }
        let mut traits = traits;
        traits.sort_by_key(|t| t.id);
        if !traits.iter().any(|t| t.significant) {
            return Err(TaxonomyError::NoSignificantTraits);
        }
        Ok(Self { traits })
    }

    /// Number of traits K.
    pub fn len(&self) -> usize {
        self.traits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traits.is_empty()
    }

    pub fn traits(&self) -> &[TraitDef] {
        &self.traits
    }

    pub fn get(&self, id: usize) -> &TraitDef {
        &self.traits[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&TraitDef> {
        self.traits.iter().find(|t| t.name == name)
    }

    /// Ids of clinically significant traits.
    pub fn significant_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.traits.iter().filter(|t| t.significant).map(|t| t.id)
    }

    /// Member ids of `group`, or an error if no trait carries that group.
    pub fn group_members(&self, group: &str) -> Result<Vec<usize>, TaxonomyError> {
        let ids: Vec<usize> = self
            .traits
            .iter()
            .filter(|t| t.group == group)
            .map(|t| t.id)
            .collect();
        if ids.is_empty() {
            return Err(TaxonomyError::UnknownGroup(group.to_string()));
        }
        Ok(ids)
    }

    /// Fingerprint of the canonical file serialization; stored in checkpoints
    /// so a model is never applied under a different ontology.
    pub fn digest(&self) -> u64 {
        fnv1a64(self.to_file_string().as_bytes())
    }

    /// Canonical file form: one CSV record per trait.
    pub fn to_file_string(&self) -> String {
        let mut out = String::from("id,name,tier,group,significant\n");
        for t in &self.traits {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                t.id,
                t.name,
                t.tier.file_token(),
                t.group,
                u8::from(t.significant)
            ));
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self, TaxonomyError> {
        let mut traits = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("id,")) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(TaxonomyError::File {
                    line: i + 1,
                    msg: format!("expected 5 fields, got {}", fields.len()),
                });
            }
            let id = fields[0].parse::<usize>().map_err(|e| TaxonomyError::File {
                line: i + 1,
                msg: format!("bad id: {e}"),
            })?;
            let tier = Tier::from_file_token(fields[2]).ok_or_else(|| TaxonomyError::File {
                line: i + 1,
                msg: format!("unknown tier `{}`", fields[2]),
            })?;
            let significant = match fields[4] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(TaxonomyError::File {
                        line: i + 1,
                        msg: format!("significant flag must be 0 or 1, got `{other}`"),
                    })
                }
            };
            traits.push(TraitDef {
                id,
                name: fields[1].to_string(),
                tier,
                group: fields[3].to_string(),
                significant,
            });
        }
        Taxonomy::new(traits)
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        Self::from_file_string(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TaxonomyError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    /// The 12-trait desk ontology used by the default phantom sampler.
    pub fn desk_default() -> Self {
        let rows: [(&str, Tier, &str, bool); 12] = [
            ("intracranial_hemorrhage", Tier::HighRisk, "ich", true),
            ("depressed_skull_fracture", Tier::HighRisk, "bone", true),
            ("acute_infarct", Tier::HighRisk, "parenchyma", true),
            ("intracranial_mass", Tier::HighRisk, "parenchyma", true),
            ("midline_shift", Tier::ModerateRisk, "ventricle", false),
            ("hydrocephalus", Tier::ModerateRisk, "ventricle", false),
            ("pneumocephalus", Tier::ModerateRisk, "air", false),
            ("skull_fracture", Tier::ModerateRisk, "bone", false),
            ("sinus_disease", Tier::ZeroRisk, "sinus", false),
            ("atrophy", Tier::ZeroRisk, "degenerative", false),
            ("scalp_swelling", Tier::ZeroRisk, "scalp", false),
            ("calcification", Tier::ZeroRisk, "degenerative", false),
        ];
        let traits = rows
            .iter()
            .enumerate()
            .map(|(id, (name, tier, group, significant))| TraitDef {
                id,
                name: (*name).to_string(),
                tier: *tier,
                group: (*group).to_string(),
                significant: *significant,
            })
            .collect();
        Taxonomy::new(traits).expect("builtin taxonomy is valid")
    }
}

/// K-length vector of per-trait values: binary ground truth or `[0,1]` scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVector {
    values: Vec<f32>,
}

impl LabelVector {
    pub fn new(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn zeros(k: usize) -> Self {
        Self { values: vec![0.0; k] }
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        Self {
            values: bits.iter().map(|&b| if b != 0 { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn to_bits(&self) -> Vec<u8> {
        self.values.iter().map(|&v| u8::from(v >= 0.5)).collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, k: usize) -> f32 {
        self.values[k]
    }

    pub fn set(&mut self, k: usize, v: f32) {
        self.values[k] = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = f32> + '_ {
        self.values.iter().copied()
    }

    /// Elementwise OR of binary vectors.
    pub fn or_with(&mut self, other: &LabelVector) {
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            if *b != 0.0 {
                *a = 1.0;
            }
        }
    }

    fn check_binary(&self, tax: &Taxonomy) -> Result<(), TaxonomyError> {
        if self.len() != tax.len() {
            return Err(TaxonomyError::DimensionMismatch {
                expected: tax.len(),
                got: self.len(),
            });
        }
        for (i, &v) in self.values.iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(TaxonomyError::NonBinaryLabel { index: i, value: v });
            }
        }
        Ok(())
    }
}

/// Training target with per-trait loss weights. `weights[k] == 0` removes
/// trait `k` from every loss term.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTarget {
    pub targets: Vec<f32>,
    pub weights: Vec<f32>,
}

/// Tier-masked target: positives strictly below the highest positive tier get
/// weight 0; every negative and every top-tier positive keeps weight 1.
pub fn effective_target(labels: &LabelVector, tax: &Taxonomy) -> Result<MaskedTarget, TaxonomyError> {
    labels.check_binary(tax)?;
    let top_tier = labels
        .iter()
        .enumerate()
        .filter(|&(_, v)| v == 1.0)
        .map(|(k, _)| tax.get(k).tier)
        .max()
        .unwrap_or(Tier::ZeroRisk);
    let weights = labels
        .iter()
        .enumerate()
        .map(|(k, v)| {
            if v == 1.0 && tax.get(k).tier < top_tier {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    Ok(MaskedTarget {
        targets: labels.as_slice().to_vec(),
        weights,
    })
}

/// Group score: max over the member traits. The group is positive iff any
/// member is, and max preserves calibration bounds.
pub fn group_reduce(scores: &LabelVector, tax: &Taxonomy, group: &str) -> Result<f32, TaxonomyError> {
    if scores.len() != tax.len() {
        return Err(TaxonomyError::DimensionMismatch {
            expected: tax.len(),
            got: scores.len(),
        });
    }
    let members = tax.group_members(group)?;
    Ok(members.into_iter().map(|k| scores.get(k)).fold(0.0, f32::max))
}

/// Composite clinically-significant score: max over significant traits.
pub fn significant_max(scores: &LabelVector, tax: &Taxonomy) -> f32 {
    tax.significant_ids()
        .map(|k| scores.get(k))
        .fold(0.0, f32::max)
}

/// True if ground truth carries any clinically significant trait.
pub fn any_significant(labels: &LabelVector, tax: &Taxonomy) -> bool {
    tax.significant_ids().any(|k| labels.get(k) != 0.0)
}
