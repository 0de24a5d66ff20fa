//! Population registry, attribute encodings and health-state labels.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structural topology of a population member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Base,
    Winglets,
    Engines,
}

impl Topology {
    /// Position on the topology axis. Engines and winglets are the most
    /// disparate pair, base sits between them.
    pub fn raw_value(self) -> f64 {
        match self {
            Topology::Engines => 0.0,
            Topology::Base => 1.0,
            Topology::Winglets => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// 1 m wingspan.
    Small,
    /// 2 m wingspan.
    Large,
}

impl Scale {
    pub fn wingspan_m(self) -> f64 {
        match self {
            Scale::Small => 1.0,
            Scale::Large => 2.0,
        }
    }

    fn raw_value(self) -> f64 {
        match self {
            Scale::Small => 0.0,
            Scale::Large => 1.0,
        }
    }
}

/// One member of the population. Field names double as the JSON keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureAttributes {
    pub id: String,
    pub topology: Topology,
    pub scale: Scale,
    pub material: String,
    pub youngs_modulus_gpa: f64,
    pub density_kg_m3: f64,
}

impl StructureAttributes {
    pub fn new(
        id: impl Into<String>,
        topology: Topology,
        scale: Scale,
        material: impl Into<String>,
        youngs_modulus_gpa: f64,
        density_kg_m3: f64,
    ) -> Self {
        Self {
            id: id.into(),
            topology,
            scale,
            material: material.into(),
            youngs_modulus_gpa,
            density_kg_m3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::invalid("structure id must not be empty"));
        }
        for (name, v) in [
            ("youngs_modulus_gpa", self.youngs_modulus_gpa),
            ("density_kg_m3", self.density_kg_m3),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid(format!(
                    "{}: {name} must be positive and finite, got {v}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    fn raw_vector(&self) -> [f64; 4] {
        [
            self.topology.raw_value(),
            self.scale.raw_value(),
            self.youngs_modulus_gpa,
            self.density_kg_m3,
        ]
    }
}

/// Damage label: 0 undamaged, 1 wing, 2 tailplane, 3 fuselage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
#[repr(u8)]
pub enum HealthState {
    Undamaged = 0,
    Wing = 1,
    Tailplane = 2,
    Fuselage = 3,
}

impl HealthState {
    pub const ALL: [HealthState; 4] = [
        HealthState::Undamaged,
        HealthState::Wing,
        HealthState::Tailplane,
        HealthState::Fuselage,
    ];

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn is_damaged(self) -> bool {
        self != HealthState::Undamaged
    }
}

impl From<HealthState> for u8 {
    fn from(s: HealthState) -> u8 {
        s as u8
    }
}

impl TryFrom<u8> for HealthState {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        HealthState::ALL
            .get(v as usize)
            .copied()
            .ok_or_else(|| Error::invalid(format!("health-state label {v} outside 0..=3")))
    }
}

impl fmt::Display for HealthState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// Encoded attributes `(topology, scale, youngs_modulus, density)`, each on `[0, 2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector(pub [f64; 4]);

impl AttributeVector {
    pub const DIM: usize = 4;
    pub const NAMES: [&'static str; 4] = ["topology", "scale", "youngs_modulus", "density"];

    pub fn components(&self) -> &[f64; 4] {
        &self.0
    }
}

/// A validated population: non-empty, unique ids, positive material constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    members: Vec<StructureAttributes>,
}

impl Population {
    pub fn new(members: Vec<StructureAttributes>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("population must not be empty"));
        }
        let mut seen = HashSet::new();
        for m in &members {
            m.validate()?;
            if !seen.insert(m.id.as_str()) {
                return Err(Error::invalid(format!("duplicate structure id `{}`", m.id)));
            }
        }
        Ok(Self { members })
    }

    pub fn builtin() -> Self {
        Self {
            members: builtin_population(),
        }
    }

    /// Reads a JSON array of [`StructureAttributes`].
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let members: Vec<StructureAttributes> =
            serde_json::from_str(&text).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })?;
        Self::new(members)
    }

    pub fn members(&self) -> &[StructureAttributes] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.members.iter().position(|m| m.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|m| m.id.as_str())
    }
}

/// The eight-aircraft laboratory population (ids G1..G8).
pub fn builtin_population() -> Vec<StructureAttributes> {
    use Scale::*;
    use Topology::*;
    vec![
        StructureAttributes::new("G1", Winglets, Small, "brass", 90.0, 8400.0),
        StructureAttributes::new("G2", Winglets, Large, "aluminium", 68.0, 2710.0),
        StructureAttributes::new("G3", Winglets, Large, "steel", 200.0, 8000.0),
        StructureAttributes::new("G4", Winglets, Large, "aluminium", 68.0, 2710.0),
        StructureAttributes::new("G5", Engines, Small, "aluminium", 68.0, 2710.0),
        StructureAttributes::new("G6", Base, Small, "steel+composite", 250.0, 3000.0),
        StructureAttributes::new("G7", Base, Small, "steel", 200.0, 8000.0),
        StructureAttributes::new("G8", Base, Large, "steel", 200.0, 8000.0),
    ]
}

/// Per-dimension min/max scaling onto `[0, 2]`, fitted to a population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeScaler {
    min: [f64; 4],
    max: [f64; 4],
}

impl AttributeScaler {
    pub fn fit(population: &[StructureAttributes]) -> Result<Self> {
        if population.is_empty() {
            return Err(Error::invalid("cannot encode an empty population"));
        }
        let mut min = [f64::INFINITY; 4];
        let mut max = [f64::NEG_INFINITY; 4];
        for s in population {
            let raw = s.raw_vector();
            if raw.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("{}: non-finite attribute", s.id)));
            }
            for d in 0..4 {
                min[d] = min[d].min(raw[d]);
                max[d] = max[d].max(raw[d]);
            }
        }
        Ok(Self { min, max })
    }

    /// Encodes one structure. Values outside the fitted range are clamped to
    /// `[0, 2]` so that out-of-population targets stay comparable.
    pub fn encode(&self, s: &StructureAttributes) -> Result<AttributeVector> {
        let raw = s.raw_vector();
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("{}: non-finite attribute", s.id)));
        }
        let mut out = [0.0; 4];
        for d in 0..4 {
            let range = self.max[d] - self.min[d];
            out[d] = if range > 0.0 {
                (2.0 * (raw[d] - self.min[d]) / range).clamp(0.0, 2.0)
            } else {
                0.0
            };
        }
        Ok(AttributeVector(out))
    }
}

/// Scales every attribute dimension to `[0, 2]` over the given population.
/// Constant dimensions encode to 0.
pub fn encode_attributes(population: &[StructureAttributes]) -> Result<Vec<AttributeVector>> {
    let scaler = AttributeScaler::fit(population)?;
    population.iter().map(|s| scaler.encode(s)).collect()
}
