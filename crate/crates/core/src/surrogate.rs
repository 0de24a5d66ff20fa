//! Seeded synthetic modal datasets.
//!
//! Each structure gets beam-scaled baseline natural frequencies
//! `f = (c / L) * sqrt(E / rho) * m(topology)`. Damage classes shift the
//! baseline by fractional amounts; samples are the class mean plus Gaussian
//! noise proportional to that mean.
//!
//! Damage is simulated by added masses, so a heavier structure sees a smaller
//! relative frequency drop. Shifts are scaled by
//! `(reference_mass_index / (rho * L^3)) ^ mass_scaling_exponent`; with an
//! exponent of zero every structure receives the raw shift table.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::{HealthState, StructureAttributes, Topology};

/// Frequency constant for the first mode, in 1/m units of the wave speed.
pub const FIRST_MODE_CONSTANT: f64 = 0.004;
/// Frequency constant for the second mode.
pub const SECOND_MODE_CONSTANT: f64 = 0.0112;

/// Frequency multiplier for attached masses (engines) and tip extensions.
pub fn topology_factor(t: Topology) -> f64 {
    match t {
        Topology::Base => 1.0,
        Topology::Engines => 0.90,
        Topology::Winglets => 0.97,
    }
}

/// Per-class fractional shifts of `(f1, f2)`, indexed by health-state label.
pub const DEFAULT_CLASS_SHIFTS: [[f64; 2]; 4] = [
    [0.0, 0.0],
    [-0.04, -0.01],
    [-0.005, -0.03],
    [-0.015, -0.015],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub samples_per_class: usize,
    /// Noise standard deviation as a fraction of the class mean.
    pub noise_fraction: f64,
    pub class_shifts: [[f64; 2]; 4],
    pub mass_scaling_exponent: f64,
    /// `rho * L^3` (kg/m^3 * m^3) at which the shift table applies unscaled.
    /// The default is the heaviest built-in structure (steel, 2 m span).
    pub reference_mass_index: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples_per_class: 50,
            noise_fraction: 0.005,
            class_shifts: DEFAULT_CLASS_SHIFTS,
            mass_scaling_exponent: 0.5,
            reference_mass_index: 64000.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_fraction > 0.0 && self.noise_fraction < 0.2) {
            return Err(Error::config(
                "generator.noise_fraction",
                format!("must lie in (0, 0.2), got {}", self.noise_fraction),
            ));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config(
                "generator.samples_per_class",
                "must be at least 1",
            ));
        }
        if self
            .class_shifts
            .iter()
            .flatten()
            .any(|s| !s.is_finite() || *s <= -1.0)
        {
            return Err(Error::config(
                "generator.class_shifts",
                "shifts must be finite and greater than -1",
            ));
        }
        if !self.mass_scaling_exponent.is_finite() || self.mass_scaling_exponent < 0.0 {
            return Err(Error::config(
                "generator.mass_scaling_exponent",
                "must be finite and non-negative",
            ));
        }
        if !(self.reference_mass_index.is_finite() && self.reference_mass_index > 0.0) {
            return Err(Error::config(
                "generator.reference_mass_index",
                "must be positive",
            ));
        }
        Ok(())
    }
}

/// Labelled natural-frequency samples for a single structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalDataset {
    pub structure_id: String,
    pub features: Vec<[f64; 2]>,
    pub labels: Vec<HealthState>,
}

impl ModalDataset {
    pub fn new(
        structure_id: impl Into<String>,
        features: Vec<[f64; 2]>,
        labels: Vec<HealthState>,
    ) -> Result<Self> {
        let structure_id = structure_id.into();
        if features.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{structure_id}: {} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(row) = features
            .iter()
            .find(|r| r.iter().any(|f| !f.is_finite() || *f <= 0.0))
        {
            return Err(Error::invalid(format!(
                "{structure_id}: frequencies must be positive and finite, got {row:?}"
            )));
        }
        Ok(Self {
            structure_id,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for l in &self.labels {
            c[l.label() as usize] += 1;
        }
        c
    }

    /// Rows whose label is `state`.
    pub fn rows_of(&self, state: HealthState) -> impl Iterator<Item = &[f64; 2]> + '_ {
        self.features
            .iter()
            .zip(&self.labels)
            .filter(move |(_, l)| **l == state)
            .map(|(f, _)| f)
    }
}

/// First two natural frequencies of the undamaged structure, in Hz.
pub fn baseline_frequencies(attrs: &StructureAttributes) -> (f64, f64) {
    let wave_speed = (attrs.youngs_modulus_gpa * 1e9 / attrs.density_kg_m3).sqrt();
    let base = wave_speed / attrs.scale.wingspan_m() * topology_factor(attrs.topology);
    (FIRST_MODE_CONSTANT * base, SECOND_MODE_CONSTANT * base)
}

/// Multiplier applied to the shift table for this structure.
pub fn damage_severity(attrs: &StructureAttributes, cfg: &GeneratorConfig) -> f64 {
    let mass_index = attrs.density_kg_m3 * attrs.scale.wingspan_m().powi(3);
    (cfg.reference_mass_index / mass_index).powf(cfg.mass_scaling_exponent)
}

/// Noise-free mean frequencies of every health state.
pub fn class_means(attrs: &StructureAttributes, cfg: &GeneratorConfig) -> [[f64; 2]; 4] {
    let (f1, f2) = baseline_frequencies(attrs);
    let severity = damage_severity(attrs, cfg);
    let mut means = [[0.0; 2]; 4];
    for (mean, shift) in means.iter_mut().zip(&cfg.class_shifts) {
        *mean = [
            f1 * (1.0 + severity * shift[0]),
            f2 * (1.0 + severity * shift[1]),
        ];
    }
    means
}

/// Draws `samples_per_class` rows per class, ordered by class, fully
/// determined by `cfg.seed`.
pub fn generate_dataset(
    attrs: &StructureAttributes,
    cfg: &GeneratorConfig,
) -> Result<ModalDataset> {
    cfg.validate()?;
    attrs.validate()?;
    let means = class_means(attrs, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = 4 * cfg.samples_per_class;
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for state in HealthState::ALL {
        let mean = means[state.label() as usize];
        for _ in 0..cfg.samples_per_class {
            let z0: f64 = StandardNormal.sample(&mut rng);
            let z1: f64 = StandardNormal.sample(&mut rng);
            features.push([
                mean[0] + cfg.noise_fraction * mean[0] * z0,
                mean[1] + cfg.noise_fraction * mean[1] * z1,
            ]);
            labels.push(state);
        }
    }
    ModalDataset::new(attrs.id.clone(), features, labels)
}

/// Seed for one structure's dataset, derived from a master seed and its id.
pub fn structure_seed(master: u64, structure_id: &str) -> u64 {
    // FNV-1a over the id, then a splitmix64 finaliser.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in structure_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Datasets for a whole population, one seed per structure derived from
/// `cfg.seed`. Returns the datasets and the seeds used.
pub fn generate_population(
    population: &[StructureAttributes],
    cfg: &GeneratorConfig,
) -> Result<Vec<(ModalDataset, u64)>> {
    population
        .iter()
        .map(|attrs| {
            let seed = structure_seed(cfg.seed, &attrs.id);
            let ds = generate_dataset(
                attrs,
                &GeneratorConfig {
                    seed,
                    ..cfg.clone()
                },
            )?;
            Ok((ds, seed))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetRow {
    structure_id: String,
    f1_hz: f64,
    f2_hz: f64,
    label: u8,
}

pub fn write_dataset_csv(ds: &ModalDataset, path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for (f, l) in ds.features.iter().zip(&ds.labels) {
        w.serialize(DatasetRow {
            structure_id: ds.structure_id.clone(),
            f1_hz: f[0],
            f2_hz: f[1],
            label: l.label(),
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset_csv(path: &Path) -> Result<ModalDataset> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut id = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for row in r.deserialize::<DatasetRow>() {
        let row = row.map_err(csv_err)?;
        match &id {
            None => id = Some(row.structure_id.clone()),
            Some(existing) if *existing != row.structure_id => {
                return Err(Error::invalid(format!(
                    "{}: mixed structure ids `{existing}` and `{}`",
                    path.display(),
                    row.structure_id
                )))
            }
            _ => {}
        }
        features.push([row.f1_hz, row.f2_hz]);
        labels.push(HealthState::try_from(row.label)?);
    }
    let id = id.ok_or_else(|| Error::invalid(format!("{}: empty dataset", path.display())))?;
    ModalDataset::new(id, features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{builtin_population, Scale};

    #[test]
    fn identical_attributes_identical_frequencies() {
        let pop = builtin_population();
        assert_eq!(baseline_frequencies(&pop[1]), baseline_frequencies(&pop[3]));
    }

    #[test]
    fn material_ratio_follows_wave_speed() {
        let pop = builtin_population();
        // G3 steel vs G4 aluminium share topology and scale.
        let r = baseline_frequencies(&pop[2]).0 / baseline_frequencies(&pop[3]).0;
        let expected = ((200.0_f64 / 8000.0) / (68.0 / 2710.0)).sqrt();
        assert!((r - expected).abs() < 1e-12);
    }

    #[test]
    fn doubling_span_halves_frequency() {
        let pop = builtin_population();
        let (small, large) = (&pop[6], &pop[7]);
        assert_eq!(small.scale, Scale::Small);
        let fs = baseline_frequencies(small);
        let fl = baseline_frequencies(large);
        assert!((fl.0 - fs.0 / 2.0).abs() < 1e-12);
        assert!((fl.1 - fs.1 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn builtin_first_mode_range() {
        for s in builtin_population() {
            let (f1, f2) = baseline_frequencies(&s);
            assert!((5.0..=40.0).contains(&f1), "{}: f1 = {f1}", s.id);
            assert!(f2 > f1);
        }
    }

    #[test]
    fn counts_and_determinism() {
        let s = &builtin_population()[0];
        let cfg = GeneratorConfig {
            seed: 9,
            ..Default::default()
        };
        let a = generate_dataset(s, &cfg).unwrap();
        let b = generate_dataset(s, &cfg).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a.class_counts(), [50; 4]);
        assert_eq!(a, b);
        let bits = |d: &ModalDataset| -> Vec<u64> {
            d.features.iter().flatten().map(|f| f.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn vanishing_noise_collapses_to_class_mean() {
        let s = &builtin_population()[4];
        let cfg = GeneratorConfig {
            noise_fraction: 1e-15,
            ..Default::default()
        };
        let ds = generate_dataset(s, &cfg).unwrap();
        let means = class_means(s, &cfg);
        for (f, l) in ds.features.iter().zip(&ds.labels) {
            let m = means[l.label() as usize];
            assert!((f[0] - m[0]).abs() <= 1e-12 * m[0]);
            assert!((f[1] - m[1]).abs() <= 1e-12 * m[1]);
        }
    }

    #[test]
    fn wing_damage_lowers_first_mode_and_samples_stay_positive() {
        let cfg = GeneratorConfig::default();
        for (ds, _) in generate_population(&builtin_population(), &cfg).unwrap() {
            let s = builtin_population()
                .into_iter()
                .find(|s| s.id == ds.structure_id)
                .unwrap();
            let m = class_means(&s, &cfg);
            assert!(m[1][0] < m[0][0]);
            let min = ds
                .features
                .iter()
                .flatten()
                .fold(f64::INFINITY, |a, &b| a.min(b));
            assert!(min > 0.0);
        }
    }

    #[test]
    fn seed_changes_samples_not_means() {
        let s = &builtin_population()[2];
        let a = GeneratorConfig {
            seed: 1,
            ..Default::default()
        };
        let b = GeneratorConfig {
            seed: 2,
            ..Default::default()
        };
        assert_ne!(
            generate_dataset(s, &a).unwrap(),
            generate_dataset(s, &b).unwrap()
        );
        assert_eq!(class_means(s, &a), class_means(s, &b));
    }

    #[test]
    fn zero_exponent_uses_raw_shift_table() {
        let s = &builtin_population()[7];
        let cfg = GeneratorConfig {
            mass_scaling_exponent: 0.0,
            ..Default::default()
        };
        let (f1, f2) = baseline_frequencies(s);
        let m = class_means(s, &cfg);
        assert!((m[1][0] - f1 * 0.96).abs() < 1e-12);
        assert!((m[2][1] - f2 * 0.97).abs() < 1e-12);
    }

    #[test]
    fn config_validation_names_field() {
        let cfg = GeneratorConfig {
            noise_fraction: 0.5,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "generator.noise_fraction"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = GeneratorConfig {
            samples_per_class: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g1.csv");
        let ds = generate_dataset(&builtin_population()[0], &GeneratorConfig::default()).unwrap();
        write_dataset_csv(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("structure_id,f1_hz,f2_hz,label\n"));
        assert_eq!(read_dataset_csv(&path).unwrap(), ds);
    }

    #[test]
    fn structure_seeds_differ_per_id() {
        assert_ne!(structure_seed(1, "G1"), structure_seed(1, "G2"));
        assert_eq!(structure_seed(1, "G1"), structure_seed(1, "G1"));
    }
}
