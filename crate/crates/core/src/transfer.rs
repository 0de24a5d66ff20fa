//! Normal-condition alignment, kNN classification, prediction-quality scoring
//! and the all-pairs transfer experiment.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::HealthState;
use crate::surrogate::ModalDataset;

/// Neighbourhood size used by the transfer experiment.
pub const DEFAULT_K: usize = 5;

/// Rates of true, false-positive, false-negative and false-damage
/// predictions. A point on the 3-simplex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityVector {
    pub tr: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub fdr: f64,
}

impl QualityVector {
    pub const NAMES: [&'static str; 4] = ["tr", "fpr", "fnr", "fdr"];

    /// Validates non-negativity and unit sum (within 1e-9).
    pub fn new(tr: f64, fpr: f64, fnr: f64, fdr: f64) -> Result<Self> {
        Self::from_array([tr, fpr, fnr, fdr])
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!(
                "quality components must be >= 0, got {a:?}"
            )));
        }
        let sum: f64 = a.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "quality vector sums to {sum}, not 1"
            )));
        }
        Ok(Self {
            tr: a[0],
            fpr: a[1],
            fnr: a[2],
            fdr: a[3],
        })
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.tr, self.fpr, self.fnr, self.fdr]
    }
}

/// `(source, target, similarity, observed quality)` for one transfer task.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferRecord {
    pub source_id: String,
    pub target_id: String,
    pub similarity: f64,
    pub quality: QualityVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferAlgorithm {
    /// Normal-condition alignment.
    Nca,
    NullTransfer,
}

/// A source domain plus the algorithm used to move information from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferStrategy {
    source: Option<String>,
    algorithm: TransferAlgorithm,
}

impl TransferStrategy {
    pub fn null() -> Self {
        Self {
            source: None,
            algorithm: TransferAlgorithm::NullTransfer,
        }
    }

    pub fn nca(source: impl Into<String>) -> Self {
        Self {
            source: Some(source.into()),
            algorithm: TransferAlgorithm::Nca,
        }
    }

    pub fn source(&self) -> Option<&str> {
        self.source.as_deref()
    }

    pub fn algorithm(&self) -> TransferAlgorithm {
        self.algorithm
    }

    pub fn is_null(&self) -> bool {
        self.source.is_none()
    }
}

/// Per-feature mean and (population) standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl NormalStats {
    pub const STANDARD: NormalStats = NormalStats {
        mean: [0.0, 0.0],
        std: [1.0, 1.0],
    };

    /// Stats of arbitrary rows, with denominator N.
    pub fn of_rows<'a>(rows: impl IntoIterator<Item = &'a [f64; 2]>) -> Result<Self> {
        let rows: Vec<&[f64; 2]> = rows.into_iter().collect();
        if rows.is_empty() {
            return Err(Error::invalid(
                "no rows to estimate normal-condition stats from",
            ));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; 2];
        for r in &rows {
            mean[0] += r[0];
            mean[1] += r[1];
        }
        mean[0] /= n;
        mean[1] /= n;
        let mut var = [0.0; 2];
        for r in &rows {
            var[0] += (r[0] - mean[0]).powi(2);
            var[1] += (r[1] - mean[1]).powi(2);
        }
        Ok(Self {
            mean,
            std: [(var[0] / n).sqrt(), (var[1] / n).sqrt()],
        })
    }

    /// Stats of the undamaged (class 0) rows of a dataset.
    pub fn of_normal_condition(ds: &ModalDataset) -> Result<Self> {
        let stats = Self::of_rows(ds.rows_of(HealthState::Undamaged))
            .map_err(|_| Error::invalid(format!("{}: no undamaged rows", ds.structure_id)))?;
        stats.check(&ds.structure_id)?;
        Ok(stats)
    }

    fn check(&self, structure: &str) -> Result<()> {
        for (feature, &std) in self.std.iter().enumerate() {
            if !(std.is_finite() && std > 0.0) || !self.mean[feature].is_finite() {
                return Err(Error::DegenerateNormalCondition {
                    structure: structure.to_string(),
                    feature,
                    std,
                });
            }
        }
        Ok(())
    }
}

/// Maps target features so that the target's normal condition lands on the
/// source's: `z = (x - mu_t) / sigma_t * sigma_s + mu_s`, per feature.
pub fn normal_condition_align(
    target: &[[f64; 2]],
    source_stats: &NormalStats,
    target_stats: &NormalStats,
) -> Result<Vec<[f64; 2]>> {
    source_stats.check("source")?;
    target_stats.check("target")?;
    Ok(target
        .iter()
        .map(|x| {
            let mut z = [0.0; 2];
            for d in 0..2 {
                z[d] = (x[d] - target_stats.mean[d]) / target_stats.std[d] * source_stats.std[d]
                    + source_stats.mean[d];
            }
            z
        })
        .collect())
}

/// Inverse of [`normal_condition_align`].
pub fn normal_condition_unalign(
    aligned: &[[f64; 2]],
    source_stats: &NormalStats,
    target_stats: &NormalStats,
) -> Result<Vec<[f64; 2]>> {
    normal_condition_align(aligned, target_stats, source_stats)
}

#[inline]
fn sq_dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Majority vote over the `k` nearest training rows (Euclidean).
///
/// Equidistant candidates at the neighbourhood boundary are admitted in
/// ascending label order, and a tied vote goes to the smallest label, so the
/// result does not depend on the order of the training rows.
pub fn knn_predict(
    train_features: &[[f64; 2]],
    train_labels: &[HealthState],
    query_features: &[[f64; 2]],
    k: usize,
) -> Result<Vec<HealthState>> {
    if train_features.len() != train_labels.len() {
        return Err(Error::invalid(
            "training features and labels differ in length",
        ));
    }
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if k > train_features.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds training size {}",
            train_features.len()
        )));
    }
    let by_distance_then_label =
        |a: &(f64, HealthState), b: &(f64, HealthState)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let mut scratch: Vec<(f64, HealthState)> = Vec::with_capacity(train_features.len());
    let mut out = Vec::with_capacity(query_features.len());
    for q in query_features {
        scratch.clear();
        scratch.extend(
            train_features
                .iter()
                .zip(train_labels)
                .map(|(x, &l)| (sq_dist(x, q), l)),
        );
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, by_distance_then_label);
        }
        let mut votes = [0usize; 4];
        for (_, l) in &scratch[..k] {
            votes[l.label() as usize] += 1;
        }
        let mut best = 0;
        for c in 1..4 {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        out.push(HealthState::ALL[best]);
    }
    Ok(out)
}

/// Fractions of true predictions, false positives (undamaged called damaged),
/// false negatives (damage missed) and false damage (wrong location).
pub fn score_quality(truth: &[HealthState], predicted: &[HealthState]) -> Result<QualityVector> {
    if truth.len() != predicted.len() {
        return Err(Error::invalid(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid("cannot score an empty prediction set"));
    }
    let mut counts = [0usize; 4];
    for (&t, &p) in truth.iter().zip(predicted) {
        let slot = match (t.is_damaged(), p.is_damaged()) {
            _ if t == p => 0,
            (false, true) => 1,
            (true, false) => 2,
            _ => 3,
        };
        counts[slot] += 1;
    }
    let n = truth.len() as f64;
    Ok(QualityVector {
        tr: counts[0] as f64 / n,
        fpr: counts[1] as f64 / n,
        fnr: counts[2] as f64 / n,
        fdr: counts[3] as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferOptions {
    pub k: usize,
    /// Z-score the source by its own normal condition before classification.
    pub standardize_source: bool,
}

impl Default for TransferOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            standardize_source: true,
        }
    }
}

impl TransferOptions {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("transfer.k", "must be at least 1"));
        }
        Ok(())
    }
}

/// Everything produced by one source/target transfer.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    /// Source features as seen by the classifier.
    pub source_features: Vec<[f64; 2]>,
    /// Normal-condition stats of `source_features`.
    pub source_stats: NormalStats,
    pub aligned_target: Vec<[f64; 2]>,
    pub predictions: Vec<HealthState>,
    pub quality: QualityVector,
}

/// Transfers from `source` to `target`: align the target's normal condition
/// onto the source's, classify with kNN trained on the labelled source, and
/// score against the target's held-back labels.
pub fn run_transfer_task(
    source: &ModalDataset,
    target: &ModalDataset,
    opts: &TransferOptions,
) -> Result<TaskOutcome> {
    let raw_source_stats = NormalStats::of_normal_condition(source)?;
    let (source_features, source_stats) = if opts.standardize_source {
        let z =
            normal_condition_align(&source.features, &NormalStats::STANDARD, &raw_source_stats)?;
        (z, NormalStats::STANDARD)
    } else {
        (source.features.clone(), raw_source_stats)
    };
    let target_stats = NormalStats::of_normal_condition(target)?;
    let aligned_target = normal_condition_align(&target.features, &source_stats, &target_stats)?;
    let predictions = knn_predict(&source_features, &source.labels, &aligned_target, opts.k)?;
    let quality = score_quality(&target.labels, &predictions)?;
    Ok(TaskOutcome {
        source_features,
        source_stats,
        aligned_target,
        predictions,
        quality,
    })
}

/// Runs every ordered `(source, target)` pair with `source != target`.
///
/// `similarity(s, t)` receives dataset indices. Output is sorted by source id,
/// then target id.
pub fn run_pairwise_transfers<F>(
    datasets: &[ModalDataset],
    similarity: F,
    opts: &TransferOptions,
) -> Result<Vec<TransferRecord>>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    if datasets.len() < 2 {
        return Err(Error::invalid("need at least two structures for transfer"));
    }
    for ds in datasets {
        let counts = ds.class_counts();
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!(
                "{}: health state {missing} has no samples",
                ds.structure_id
            )));
        }
    }
    let pairs: Vec<(usize, usize)> = (0..datasets.len())
        .flat_map(|s| {
            (0..datasets.len())
                .filter(move |&t| t != s)
                .map(move |t| (s, t))
        })
        .collect();
    let mut records = pairs
        .par_iter()
        .map(|&(s, t)| {
            let outcome = run_transfer_task(&datasets[s], &datasets[t], opts)?;
            Ok(TransferRecord {
                source_id: datasets[s].structure_id.clone(),
                target_id: datasets[t].structure_id.clone(),
                similarity: similarity(s, t),
                quality: outcome.quality,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| {
        a.source_id
            .cmp(&b.source_id)
            .then_with(|| a.target_id.cmp(&b.target_id))
    });
    Ok(records)
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordRow {
    source_id: String,
    target_id: String,
    similarity: f64,
    tr: f64,
    fpr: f64,
    fnr: f64,
    fdr: f64,
}

pub fn write_records_csv(records: &[TransferRecord], path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(RecordRow {
            source_id: r.source_id.clone(),
            target_id: r.target_id.clone(),
            similarity: r.similarity,
            tr: r.quality.tr,
            fpr: r.quality.fpr,
            fnr: r.quality.fnr,
            fdr: r.quality.fdr,
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<TransferRecord>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize::<RecordRow>()
        .map(|row| {
            let row = row.map_err(csv_err)?;
            Ok(TransferRecord {
                quality: QualityVector::new(row.tr, row.fpr, row.fnr, row.fdr)?,
                source_id: row.source_id,
                target_id: row.target_id,
                similarity: row.similarity,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::builtin_population;
    use crate::surrogate::{generate_dataset, GeneratorConfig};
    use HealthState::*;

    fn labels(v: &[u8]) -> Vec<HealthState> {
        v.iter()
            .map(|&l| HealthState::try_from(l).unwrap())
            .collect()
    }

    #[test]
    fn align_identity_when_stats_match() {
        let s = NormalStats {
            mean: [3.0, 4.0],
            std: [0.5, 2.0],
        };
        let x = vec![[1.0, 2.0], [7.5, -3.0]];
        assert_eq!(normal_condition_align(&x, &s, &s).unwrap(), x);
    }

    #[test]
    fn align_worked_example() {
        let t = NormalStats {
            mean: [5.0, 5.0],
            std: [2.0, 2.0],
        };
        let z = normal_condition_align(&[[7.0, 5.0]], &NormalStats::STANDARD, &t).unwrap();
        assert_eq!(z, vec![[1.0, 0.0]]);
    }

    #[test]
    fn align_reproduces_source_stats() {
        let ds = generate_dataset(&builtin_population()[3], &GeneratorConfig::default()).unwrap();
        let t = NormalStats::of_normal_condition(&ds).unwrap();
        let s = NormalStats {
            mean: [12.0, -3.0],
            std: [0.7, 4.0],
        };
        let normal: Vec<[f64; 2]> = ds.rows_of(Undamaged).copied().collect();
        let z = normal_condition_align(&normal, &s, &t).unwrap();
        let re = NormalStats::of_rows(&z).unwrap();
        for d in 0..2 {
            assert!((re.mean[d] - s.mean[d]).abs() < 1e-9);
            assert!((re.std[d] - s.std[d]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_spread_normal_condition_is_rejected() {
        let ds = ModalDataset::new(
            "flat",
            vec![[1.0, 2.0], [1.0, 3.0], [4.0, 4.0]],
            labels(&[0, 0, 1]),
        )
        .unwrap();
        assert!(matches!(
            NormalStats::of_normal_condition(&ds),
            Err(Error::DegenerateNormalCondition { feature: 0, .. })
        ));
        let bad = NormalStats {
            mean: [0.0, 0.0],
            std: [1.0, f64::NAN],
        };
        assert!(matches!(
            normal_condition_align(&[[0.0, 0.0]], &NormalStats::STANDARD, &bad),
            Err(Error::DegenerateNormalCondition { feature: 1, .. })
        ));
    }

    #[test]
    fn knn_separated_clusters() {
        let mut x = vec![[0.0, 0.0]; 5];
        x.extend(vec![[10.0, 10.0]; 5]);
        let y = labels(&[0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(
            knn_predict(&x, &y, &[[0.1, 0.0]], 5).unwrap(),
            vec![Undamaged]
        );
        assert_eq!(knn_predict(&x, &y, &[[10.0, 10.0]], 5).unwrap(), vec![Wing]);
    }

    #[test]
    fn knn_vote_tie_goes_to_smallest_label() {
        let x = vec![[0.0, 1.0], [0.0, -1.0], [1.0, 0.0], [-1.0, 0.0]];
        let y = labels(&[3, 3, 2, 2]);
        assert_eq!(
            knn_predict(&x, &y, &[[0.0, 0.0]], 4).unwrap(),
            vec![Tailplane]
        );
    }

    #[test]
    fn knn_rejects_oversized_k() {
        let x = vec![[0.0, 0.0]; 3];
        let y = labels(&[0, 1, 2]);
        assert!(matches!(
            knn_predict(&x, &y, &[[0.0, 0.0]], 4),
            Err(Error::InvalidInput(_))
        ));
        assert!(knn_predict(&x, &y, &[[0.0, 0.0]], 0).is_err());
    }

    #[test]
    fn quality_examples() {
        let q = score_quality(&labels(&[0, 1, 2, 3]), &labels(&[0, 0, 2, 1])).unwrap();
        assert_eq!(q.to_array(), [0.5, 0.0, 0.25, 0.25]);
        let t = labels(&[0, 1, 2, 3, 3]);
        assert_eq!(
            score_quality(&t, &t).unwrap().to_array(),
            [1.0, 0.0, 0.0, 0.0]
        );
        let q = score_quality(&labels(&[0, 0, 0]), &labels(&[3, 3, 3])).unwrap();
        assert_eq!(q.to_array(), [0.0, 1.0, 0.0, 0.0]);
        assert!(score_quality(&labels(&[0]), &labels(&[0, 1])).is_err());
    }

    #[test]
    fn strategy_null_iff_no_source() {
        assert!(TransferStrategy::null().is_null());
        assert_eq!(
            TransferStrategy::null().algorithm(),
            TransferAlgorithm::NullTransfer
        );
        let s = TransferStrategy::nca("G3");
        assert_eq!(s.source(), Some("G3"));
        assert_eq!(s.algorithm(), TransferAlgorithm::Nca);
    }

    #[test]
    fn identical_domains_self_classify() {
        let pop = builtin_population();
        let cfg = GeneratorConfig {
            seed: 5,
            noise_fraction: 0.0005,
            ..Default::default()
        };
        let mut a = generate_dataset(&pop[1], &cfg).unwrap();
        let mut b = generate_dataset(&pop[3], &cfg).unwrap();
        a.structure_id = "A".into();
        b.structure_id = "B".into();
        let recs =
            run_pairwise_transfers(&[a, b], |_, _| 1.0, &TransferOptions::default()).unwrap();
        assert_eq!(recs.len(), 2);
        for r in recs {
            assert_ne!(r.source_id, r.target_id);
            assert_eq!(r.quality.to_array(), [1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn pairwise_needs_all_classes() {
        let pop = builtin_population();
        let cfg = GeneratorConfig::default();
        let a = generate_dataset(&pop[0], &cfg).unwrap();
        let n = a.len() - 50;
        let b = ModalDataset::new("B", a.features[..n].to_vec(), a.labels[..n].to_vec()).unwrap();
        assert!(run_pairwise_transfers(&[a, b], |_, _| 0.5, &TransferOptions::default()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn label_strategy() -> impl Strategy<Value = HealthState> {
            (0u8..4).prop_map(|l| HealthState::try_from(l).unwrap())
        }

        proptest! {
            #[test]
            fn quality_always_on_simplex(
                pairs in prop::collection::vec((label_strategy(), label_strategy()), 1..300)
            ) {
                let (t, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
                let q = score_quality(&t, &p).unwrap();
                let a = q.to_array();
                prop_assert!(a.iter().all(|v| *v >= 0.0));
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn align_round_trips(
                rows in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..50),
                m in (-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0),
                s in (0.01f64..20.0, 0.01f64..20.0, 0.01f64..20.0, 0.01f64..20.0),
            ) {
                let x: Vec<[f64; 2]> = rows.iter().map(|&(a, b)| [a, b]).collect();
                let src = NormalStats { mean: [m.0, m.1], std: [s.0, s.1] };
                let tgt = NormalStats { mean: [m.2, m.3], std: [s.2, s.3] };
                let z = normal_condition_align(&x, &src, &tgt).unwrap();
                let back = normal_condition_unalign(&z, &src, &tgt).unwrap();
                for (a, b) in x.iter().zip(&back) {
                    prop_assert!((a[0] - b[0]).abs() < 1e-9);
                    prop_assert!((a[1] - b[1]).abs() < 1e-9);
                }
            }

            #[test]
            fn knn_ignores_training_order(
                train in prop::collection::vec(((0i32..6, 0i32..6), label_strategy()), 5..60),
                queries in prop::collection::vec((0i32..6, 0i32..6), 1..10),
                rot in 0usize..60,
            ) {
                // integer grid coordinates force plenty of distance ties
                let x: Vec<[f64; 2]> = train.iter().map(|((a, b), _)| [*a as f64, *b as f64]).collect();
                let y: Vec<HealthState> = train.iter().map(|(_, l)| *l).collect();
                let q: Vec<[f64; 2]> = queries.iter().map(|&(a, b)| [a as f64, b as f64]).collect();
                let base = knn_predict(&x, &y, &q, 5).unwrap();

                let mut idx: Vec<usize> = (0..x.len()).collect();
                idx.reverse();
                idx.rotate_left(rot % x.len());
                let xp: Vec<_> = idx.iter().map(|&i| x[i]).collect();
                let yp: Vec<_> = idx.iter().map(|&i| y[i]).collect();
                prop_assert_eq!(base, knn_predict(&xp, &yp, &q, 5).unwrap());
            }
        }
    }
}
