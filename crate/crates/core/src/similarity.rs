//! Weighted structural similarity and correlation-driven weight fitting.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::AttributeVector;
use crate::transfer::TransferRecord;

/// Non-negative attribute weights with unit L2 norm, ordered
/// `(topology, scale, youngs_modulus, density)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityWeights([f64; 4]);

impl SimilarityWeights {
    pub fn new(w: [f64; 4]) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!(
                "weights must be non-negative, got {w:?}"
            )));
        }
        let norm = l2(&w);
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "weights must have unit norm, got {norm}"
            )));
        }
        Ok(Self(w))
    }

    /// Projects onto the non-negative unit sphere.
    pub fn normalized(w: [f64; 4]) -> Result<Self> {
        let clipped = w.map(|v| if v.is_finite() { v.max(0.0) } else { f64::NAN });
        let norm = l2(&clipped);
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::invalid(format!("cannot normalise weights {w:?}")));
        }
        Ok(Self(clipped.map(|v| v / norm)))
    }

    /// `(1/2, 1/2, 1/2, 1/2)`.
    pub fn equal() -> Self {
        Self([0.5; 4])
    }

    pub fn as_array(&self) -> &[f64; 4] {
        &self.0
    }
}

fn l2(w: &[f64; 4]) -> f64 {
    w.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `sqrt(sum_k w_k (a_k - b_k)^2)`.
pub fn weighted_distance(a: &AttributeVector, b: &AttributeVector, w: &SimilarityWeights) -> f64 {
    a.0.iter()
        .zip(&b.0)
        .zip(&w.0)
        .map(|((x, y), wk)| wk * (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Pairwise similarities `1 - d_ij / max d`, plus the normalising distance.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Vec<Vec<f64>>,
    max_distance: f64,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn max_distance(&self) -> f64 {
        self.max_distance
    }
}

pub fn similarity_matrix(
    encoded: &[AttributeVector],
    w: &SimilarityWeights,
) -> Result<SimilarityMatrix> {
    let n = encoded.len();
    if n < 2 {
        return Err(Error::invalid("similarity needs at least two structures"));
    }
    let mut d = vec![vec![0.0; n]; n];
    let mut max_distance = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dij = weighted_distance(&encoded[i], &encoded[j], w);
            d[i][j] = dij;
            d[j][i] = dij;
            max_distance = max_distance.max(dij);
        }
    }
    if max_distance <= 0.0 {
        return Err(Error::DegeneratePopulation);
    }
    let values = d
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|dij| 1.0 - dij / max_distance)
                .collect()
        })
        .collect();
    Ok(SimilarityMatrix {
        values,
        max_distance,
    })
}

/// Similarity of an outside structure to `candidate`, normalised by the
/// population's maximum distance and floored at 0.
pub fn similarity_to(
    target: &AttributeVector,
    candidate: &AttributeVector,
    w: &SimilarityWeights,
    max_distance: f64,
) -> f64 {
    (1.0 - weighted_distance(target, candidate, w) / max_distance).clamp(0.0, 1.0)
}

/// Sample Pearson correlation coefficient.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "pearson_r: lengths {} and {} differ",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::invalid("pearson_r needs at least three points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    // Relative thresholds: a column of equal values can leave rounding residue.
    let scale_x = x
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let scale_y = y
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    if sxx <= (1e-14 * scale_x).powi(2) * n {
        return Err(Error::UndefinedCorrelation("x"));
    }
    if syy <= (1e-14 * scale_y).powi(2) * n {
        return Err(Error::UndefinedCorrelation("y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightSearchConfig {
    pub seed: u64,
    /// Random starting points on the non-negative unit sphere, in addition
    /// to the equal-weights start.
    pub starts: usize,
    pub initial_step: f64,
    pub min_step: f64,
    pub max_iterations: usize,
}

impl Default for WeightSearchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            starts: 64,
            initial_step: 0.25,
            min_step: 1e-9,
            max_iterations: 20_000,
        }
    }
}

impl WeightSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_step.is_finite() && self.initial_step > 0.0) {
            return Err(Error::config("weights.initial_step", "must be positive"));
        }
        if !(self.min_step > 0.0 && self.min_step <= self.initial_step) {
            return Err(Error::config(
                "weights.min_step",
                "must be positive and no larger than initial_step",
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::config(
                "weights.max_iterations",
                "must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Optimised weights and the correlation they achieve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightFit {
    pub weights: SimilarityWeights,
    pub pearson_r: f64,
    /// Correlation at equal weights.
    pub baseline_r: f64,
}

/// On-disk form of a [`WeightFit`], keys in attribute order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub w_topology: f64,
    pub w_scale: f64,
    pub w_youngs_modulus: f64,
    pub w_density: f64,
    pub pearson_r: f64,
}

impl WeightFit {
    pub fn to_file(&self) -> WeightsFile {
        let w = self.weights.as_array();
        WeightsFile {
            w_topology: w[0],
            w_scale: w[1],
            w_youngs_modulus: w[2],
            w_density: w[3],
            pearson_r: self.pearson_r,
        }
    }

    /// The baseline is not stored and reads back as NaN.
    pub fn from_file(j: &WeightsFile) -> Result<Self> {
        Ok(Self {
            weights: SimilarityWeights::new([
                j.w_topology,
                j.w_scale,
                j.w_youngs_modulus,
                j.w_density,
            ])?,
            pearson_r: j.pearson_r,
            baseline_r: f64::NAN,
        })
    }
}

/// Correlation between observed TR and similarity under `w` for a fixed set
/// of `(source index, target index, tr)` triples.
struct Objective<'a> {
    encoded: &'a [AttributeVector],
    pairs: Vec<(usize, usize)>,
    tr: Vec<f64>,
}

impl Objective<'_> {
    fn eval(&self, w: &SimilarityWeights) -> Result<f64> {
        let sim = similarity_matrix(self.encoded, w)?;
        let s: Vec<f64> = self.pairs.iter().map(|&(i, j)| sim.get(i, j)).collect();
        pearson_r(&self.tr, &s)
    }

    fn score(&self, w: &SimilarityWeights) -> f64 {
        self.eval(w).unwrap_or(f64::NEG_INFINITY)
    }

    /// Coordinate pattern search on the non-negative unit sphere.
    fn climb(
        &self,
        start: SimilarityWeights,
        cfg: &WeightSearchConfig,
    ) -> (SimilarityWeights, f64) {
        let mut best = start;
        let mut best_r = self.score(&best);
        let mut step = cfg.initial_step;
        let mut iterations = 0;
        while step > cfg.min_step && iterations < cfg.max_iterations {
            iterations += 1;
            let mut improved = false;
            for k in 0..4 {
                for dir in [1.0, -1.0] {
                    let mut raw = best.0;
                    raw[k] += dir * step;
                    let Ok(cand) = SimilarityWeights::normalized(raw) else {
                        continue;
                    };
                    let r = self.score(&cand);
                    if r > best_r {
                        best = cand;
                        best_r = r;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        (best, best_r)
    }
}

fn lexicographic(a: &[f64; 4], b: &[f64; 4]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Maximises the Pearson correlation between observed TR and similarity over
/// non-negative unit-norm weights.
///
/// `ids[i]` names the structure encoded as `encoded[i]`; every record must
/// refer to known ids. The equal-weights point is always one of the starts,
/// so the result never falls below it.
pub fn optimize_weights(
    records: &[TransferRecord],
    ids: &[&str],
    encoded: &[AttributeVector],
    cfg: &WeightSearchConfig,
) -> Result<WeightFit> {
    cfg.validate()?;
    if ids.len() != encoded.len() {
        return Err(Error::invalid("ids and encodings differ in length"));
    }
    if records.len() < 4 {
        return Err(Error::invalid(format!(
            "weight optimisation needs at least 4 records, got {}",
            records.len()
        )));
    }
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let lookup = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("record refers to unknown structure `{id}`")))
    };
    let pairs = records
        .iter()
        .map(|r| Ok((lookup(&r.source_id)?, lookup(&r.target_id)?)))
        .collect::<Result<Vec<_>>>()?;
    let tr: Vec<f64> = records.iter().map(|r| r.quality.tr).collect();
    let first = tr[0];
    if tr.iter().all(|&v| v == first) {
        return Err(Error::UndefinedCorrelation("tr"));
    }
    let objective = Objective { encoded, pairs, tr };

    let baseline = SimilarityWeights::equal();
    let baseline_r = objective.eval(&baseline)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut starts = vec![baseline];
    while starts.len() < cfg.starts + 1 {
        let raw: [f64; 4] = std::array::from_fn(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z.abs()
        });
        if let Ok(w) = SimilarityWeights::normalized(raw) {
            starts.push(w);
        }
    }

    let results: Vec<(SimilarityWeights, f64)> = starts
        .par_iter()
        .map(|s| objective.climb(*s, cfg))
        .collect();
    let (weights, pearson_r) = results
        .into_iter()
        .chain(std::iter::once((baseline, baseline_r)))
        .max_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then_with(|| lexicographic(&b.0 .0, &a.0 .0))
        })
        .expect("at least the baseline candidate");
    Ok(WeightFit {
        weights,
        pearson_r,
        baseline_r,
    })
}
