//! Expected utility of prediction quality, EVIT, and strategy selection.
//!
//! Utilities are per prediction, so the expected utility of a target with `M`
//! datapoints is `M * (tr*u_true + fpr*u_fp + fnr*u_fn + fdr*u_fd)`. EVIT is
//! that figure for a transfer minus the same figure for the null strategy,
//! which guesses labels uniformly at random.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::efficacy::{quantile_sorted, sample_dirichlet, EfficacyModel};
use crate::error::{Error, Result};
use crate::transfer::{QualityVector, TransferStrategy};

/// Utility per prediction type, in utiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UtilityTable {
    pub u_true: f64,
    pub u_fp: f64,
    pub u_fn: f64,
    pub u_fd: f64,
}

impl Default for UtilityTable {
    fn default() -> Self {
        Self {
            u_true: 5.0,
            u_fp: -10.0,
            u_fn: -50.0,
            u_fd: -5.0,
        }
    }
}

impl UtilityTable {
    pub fn validate(&self) -> Result<()> {
        if !self.as_array().iter().all(|u| u.is_finite()) {
            return Err(Error::config("utilities", "all utilities must be finite"));
        }
        if self.u_true <= 0.0 {
            return Err(Error::config("utilities.u_true", "must be positive"));
        }
        for (name, u) in [
            ("u_fp", self.u_fp),
            ("u_fn", self.u_fn),
            ("u_fd", self.u_fd),
        ] {
            if u >= 0.0 {
                return Err(Error::config(
                    format!("utilities.{name}"),
                    "must be negative",
                ));
            }
        }
        Ok(())
    }

    /// In quality-vector order: TR, FPR, FNR, FDR.
    pub fn as_array(&self) -> [f64; 4] {
        [self.u_true, self.u_fp, self.u_fn, self.u_fd]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValuationConfig {
    /// Number of unlabelled target datapoints, `M`.
    pub target_size: u64,
    /// Target class proportions assumed by the null baseline, in label order.
    pub class_proportions: [f64; 4],
    /// Cost term `U(T)` per source id; missing sources cost `default_cost`.
    pub transfer_costs: BTreeMap<String, f64>,
    pub default_cost: f64,
    /// `U(T0)`.
    pub null_cost: f64,
    /// Dirichlet draws per EVIT distribution.
    pub samples: usize,
    /// Central interval level for sampled summaries.
    pub level: f64,
}

impl Default for ValuationConfig {
    fn default() -> Self {
        Self {
            target_size: 200,
            class_proportions: [0.25; 4],
            transfer_costs: BTreeMap::new(),
            default_cost: 0.0,
            null_cost: 0.0,
            samples: 10_000,
            level: 0.90,
        }
    }
}

impl ValuationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::config("valuation.target_size", "must be at least 1"));
        }
        check_proportions(&self.class_proportions)
            .map_err(|e| Error::config("valuation.class_proportions", e.to_string()))?;
        if !self.default_cost.is_finite() || !self.null_cost.is_finite() {
            return Err(Error::config("valuation", "transfer costs must be finite"));
        }
        if let Some((id, _)) = self.transfer_costs.iter().find(|(_, c)| !c.is_finite()) {
            return Err(Error::config(
                format!("valuation.transfer_costs.{id}"),
                "must be finite",
            ));
        }
        if self.samples == 0 {
            return Err(Error::config("valuation.samples", "must be at least 1"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::config("valuation.level", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn transfer_cost(&self, strategy: &TransferStrategy) -> f64 {
        match strategy.source() {
            None => self.null_cost,
            Some(id) => self
                .transfer_costs
                .get(id)
                .copied()
                .unwrap_or(self.default_cost),
        }
    }
}

fn check_proportions(p: &[f64]) -> Result<()> {
    if p.len() < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(
            "class proportions must be finite and non-negative",
        ));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "class proportions sum to {s}, expected 1"
        )));
    }
    Ok(())
}

/// Quality of guessing each of `C = proportions.len()` labels with equal
/// probability. Label 0 is the undamaged class. For `C = 2` there is no
/// localisation, so the FDR entry is zero.
pub fn null_baseline_quality(proportions: &[f64]) -> Result<QualityVector> {
    check_proportions(proportions)?;
    let c = proportions.len() as f64;
    let p0 = proportions[0];
    let damaged: f64 = proportions[1..].iter().sum();
    let tr = proportions.iter().sum::<f64>() / c;
    let fpr = p0 * (c - 1.0) / c;
    let fnr = damaged / c;
    let fdr = damaged * (c - 2.0) / c;
    QualityVector::from_array([tr, fpr, fnr, fdr])
}

/// `M * (q . u)` for a mean quality vector.
pub fn expected_utility(q: &QualityVector, u: &UtilityTable, target_size: u64) -> f64 {
    utility_of(&q.to_array(), u, target_size)
}

fn utility_of(q: &[f64; 4], u: &UtilityTable, target_size: u64) -> f64 {
    let per = q
        .iter()
        .zip(u.as_array())
        .map(|(qk, uk)| qk * uk)
        .sum::<f64>();
    target_size as f64 * per
}

/// Expected utility of the null strategy under `cfg`.
pub fn null_expected_utility(u: &UtilityTable, cfg: &ValuationConfig) -> Result<f64> {
    let q0 = null_baseline_quality(&cfg.class_proportions)?;
    Ok(expected_utility(&q0, u, cfg.target_size))
}

/// EVIT of a transfer whose expected quality is `mean`.
pub fn evit_from_mean(mean: &[f64; 4], u: &UtilityTable, cfg: &ValuationConfig) -> Result<f64> {
    Ok(utility_of(mean, u, cfg.target_size) - null_expected_utility(u, cfg)?)
}

/// Analytic EVIT plus a summary of its sampled distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvitSummary {
    pub similarity: f64,
    /// From the Dirichlet mean.
    pub evit: f64,
    pub sampled_mean: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn evit<M: EfficacyModel + ?Sized>(
    model: &M,
    similarity: f64,
    u: &UtilityTable,
    cfg: &ValuationConfig,
    seed: u64,
) -> Result<EvitSummary> {
    cfg.validate()?;
    let alpha = model.concentrations(similarity);
    let base = null_expected_utility(u, cfg)?;
    let value = utility_of(&alpha.mean(), u, cfg.target_size) - base;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws: Vec<f64> = sample_dirichlet(&alpha, cfg.samples, &mut rng)
        .iter()
        .map(|q| utility_of(q, u, cfg.target_size) - base)
        .collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = if draws.len() > 1 {
        draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    draws.sort_by(f64::total_cmp);
    let tail = (1.0 - cfg.level) / 2.0;
    Ok(EvitSummary {
        similarity,
        evit: value,
        sampled_mean: mean,
        std_error: (var / n).sqrt(),
        lower: quantile_sorted(&draws, tail),
        upper: quantile_sorted(&draws, 1.0 - tail),
    })
}

/// EVIT over a similarity grid. Grid point `g` samples with seed `seed + g`.
pub fn evit_curve<M: EfficacyModel + ?Sized>(
    model: &M,
    grid: &[f64],
    u: &UtilityTable,
    cfg: &ValuationConfig,
    seed: u64,
) -> Result<Vec<EvitSummary>> {
    grid.iter()
        .enumerate()
        .map(|(g, &s)| evit(model, s, u, cfg, seed.wrapping_add(g as u64)))
        .collect()
}

/// A possible source for the target, with its similarity score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub source_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyEvaluation {
    pub strategy: TransferStrategy,
    /// `None` for the null strategy.
    pub similarity: Option<f64>,
    pub evit: f64,
    pub transfer_cost: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyDecision {
    /// Best first.
    pub ranked: Vec<StrategyEvaluation>,
}

impl StrategyDecision {
    pub fn best(&self) -> &StrategyEvaluation {
        &self.ranked[0]
    }
}

fn rank(a: &StrategyEvaluation, b: &StrategyEvaluation) -> Ordering {
    // higher total first; on ties prefer not transferring, then the more
    // similar source, then the smaller id
    b.total
        .total_cmp(&a.total)
        .then_with(|| b.strategy.is_null().cmp(&a.strategy.is_null()))
        .then_with(|| {
            let sa = a.similarity.unwrap_or(f64::NEG_INFINITY);
            let sb = b.similarity.unwrap_or(f64::NEG_INFINITY);
            sb.total_cmp(&sa)
        })
        .then_with(|| a.strategy.source().cmp(&b.strategy.source()))
}

/// Scores every candidate and the null strategy by `EVIT + U(T)`.
pub fn optimize_strategy<M: EfficacyModel + ?Sized>(
    model: &M,
    candidates: &[Candidate],
    u: &UtilityTable,
    cfg: &ValuationConfig,
) -> Result<StrategyDecision> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate sources"));
    }
    cfg.validate()?;
    let base = null_expected_utility(u, cfg)?;
    let null = TransferStrategy::null();
    let null_cost = cfg.transfer_cost(&null);
    let mut ranked = vec![StrategyEvaluation {
        strategy: null,
        similarity: None,
        evit: 0.0,
        transfer_cost: null_cost,
        total: null_cost,
    }];
    for c in candidates {
        if !(0.0..=1.0).contains(&c.similarity) {
            return Err(Error::invalid(format!(
                "similarity of {} is {}, outside [0, 1]",
                c.source_id, c.similarity
            )));
        }
        let strategy = TransferStrategy::nca(c.source_id.clone());
        let value = utility_of(
            &model.concentrations(c.similarity).mean(),
            u,
            cfg.target_size,
        ) - base;
        let cost = cfg.transfer_cost(&strategy);
        ranked.push(StrategyEvaluation {
            strategy,
            similarity: Some(c.similarity),
            evit: value,
            transfer_cost: cost,
            total: value + cost,
        });
    }
    ranked.sort_by(rank);
    Ok(StrategyDecision { ranked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::efficacy::{ConstantConcentration, DirichletParams};
    use proptest::prelude::*;

    /// Concentrations interpolated linearly in similarity between two
    /// fixed vectors.
    struct Linear([f64; 4], [f64; 4]);

    impl EfficacyModel for Linear {
        fn concentrations(&self, s: f64) -> DirichletParams {
            DirichletParams::new(std::array::from_fn(|k| {
                self.0[k] + s * (self.1[k] - self.0[k])
            }))
            .unwrap()
        }
    }

    fn monotone() -> Linear {
        Linear([2.0, 2.0, 2.0, 2.0], [20.0, 1.0, 1.0, 1.0])
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn uniform_baseline() {
        let q = null_baseline_quality(&[0.25; 4]).unwrap().to_array();
        assert_eq!(q, [0.25, 0.1875, 0.1875, 0.375]);
    }

    #[test]
    fn all_undamaged_baseline() {
        let q = null_baseline_quality(&[1.0, 0.0, 0.0, 0.0])
            .unwrap()
            .to_array();
        assert_eq!(q, [0.25, 0.75, 0.0, 0.0]);
    }

    #[test]
    fn detection_only_baseline() {
        let q = null_baseline_quality(&[0.5, 0.5]).unwrap().to_array();
        assert_eq!(q, [0.5, 0.25, 0.25, 0.0]);
    }

    #[test]
    fn bad_proportions_rejected() {
        assert!(null_baseline_quality(&[0.5, 0.6]).is_err());
        assert!(null_baseline_quality(&[1.0]).is_err());
        assert!(null_baseline_quality(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn table_two_values() {
        let u = UtilityTable::default();
        let q0 = null_baseline_quality(&[0.25; 4]).unwrap();
        assert_eq!(expected_utility(&q0, &u, 200), -2375.0);
        let perfect = QualityVector::new(1.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(expected_utility(&perfect, &u, 200), 1000.0);
        assert_eq!(expected_utility(&perfect, &u, 0), 0.0);
        let cfg = ValuationConfig::default();
        assert_eq!(
            evit_from_mean(&[1.0, 0.0, 0.0, 0.0], &u, &cfg).unwrap(),
            3375.0
        );
    }

    #[test]
    fn baseline_model_has_zero_evit() {
        let u = UtilityTable::default();
        let cfg = ValuationConfig::default();
        let m = ConstantConcentration(DirichletParams::new([4.0, 3.0, 3.0, 6.0]).unwrap());
        let e = evit(&m, 0.5, &u, &cfg, 1).unwrap();
        assert!(e.evit.abs() < 1e-9, "{}", e.evit);
    }

    #[test]
    fn sampled_mean_converges() {
        let u = UtilityTable::default();
        let cfg = ValuationConfig {
            samples: 100_000,
            ..Default::default()
        };
        let m = ConstantConcentration(DirichletParams::new([6.0, 1.5, 0.8, 2.0]).unwrap());
        let e = evit(&m, 0.3, &u, &cfg, 42).unwrap();
        assert!(
            (e.sampled_mean - e.evit).abs() < 3.0 * e.std_error,
            "{} vs {} (se {})",
            e.sampled_mean,
            e.evit,
            e.std_error
        );
        assert!(e.lower < e.evit && e.evit < e.upper);
    }

    #[test]
    fn evit_is_seeded() {
        let u = UtilityTable::default();
        let cfg = ValuationConfig::default();
        let a = evit(&monotone(), 0.4, &u, &cfg, 9).unwrap();
        let b = evit(&monotone(), 0.4, &u, &cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn higher_similarity_chosen() {
        let u = UtilityTable::default();
        let cfg = ValuationConfig::default();
        let cands = vec![
            Candidate {
                source_id: "A".into(),
                similarity: 0.2,
            },
            Candidate {
                source_id: "B".into(),
                similarity: 0.9,
            },
        ];
        let d = optimize_strategy(&monotone(), &cands, &u, &cfg).unwrap();
        assert_eq!(d.best().strategy.source(), Some("B"));
        assert_eq!(d.ranked.len(), 3);
    }

    #[test]
    fn negative_transfer_avoided() {
        let u = UtilityTable::default();
        let cfg = ValuationConfig::default();
        // mostly false negatives: worse than guessing
        let bad = ConstantConcentration(DirichletParams::new([1.0, 1.0, 8.0, 1.0]).unwrap());
        let cands = vec![
            Candidate {
                source_id: "A".into(),
                similarity: 0.5,
            },
            Candidate {
                source_id: "B".into(),
                similarity: 0.9,
            },
        ];
        let d = optimize_strategy(&bad, &cands, &u, &cfg).unwrap();
        assert!(d.ranked.iter().skip(1).all(|e| e.evit < 0.0));
        assert!(d.best().strategy.is_null());
    }

    #[test]
    fn cost_can_dominate() {
        let u = UtilityTable::default();
        let m = monotone();
        let value = evit_from_mean(
            &m.concentrations(0.7).mean(),
            &u,
            &ValuationConfig::default(),
        )
        .unwrap();
        assert!(value > 0.0);
        let mut cfg = ValuationConfig::default();
        cfg.transfer_costs.insert("A".into(), -10.0 * value);
        let cands = vec![Candidate {
            source_id: "A".into(),
            similarity: 0.7,
        }];
        let d = optimize_strategy(&m, &cands, &u, &cfg).unwrap();
        assert!(d.best().strategy.is_null());
        assert!(close(d.ranked[1].total, -9.0 * value));
    }

    #[test]
    fn ties_prefer_null() {
        let u = UtilityTable::default();
        let cfg = ValuationConfig::default();
        let m = ConstantConcentration(DirichletParams::new([4.0, 3.0, 3.0, 6.0]).unwrap());
        let cands = vec![Candidate {
            source_id: "A".into(),
            similarity: 0.5,
        }];
        let d = optimize_strategy(&m, &cands, &u, &cfg).unwrap();
        assert!(d.best().strategy.is_null());
    }

    #[test]
    fn empty_candidates_rejected() {
        let r = optimize_strategy(
            &monotone(),
            &[],
            &UtilityTable::default(),
            &ValuationConfig::default(),
        );
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn config_validation_names_field() {
        let cfg = ValuationConfig {
            target_size: 0,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "valuation.target_size"),
            other => panic!("{other:?}"),
        }
        let u = UtilityTable {
            u_fn: 3.0,
            ..Default::default()
        };
        assert!(u.validate().is_err());
    }

    fn utilities() -> impl Strategy<Value = UtilityTable> {
        (
            0.1..100.0f64,
            -100.0..-0.1f64,
            -100.0..-0.1f64,
            -100.0..-0.1f64,
        )
            .prop_map(|(a, b, c, d)| UtilityTable {
                u_true: a,
                u_fp: b,
                u_fn: c,
                u_fd: d,
            })
    }

    fn proportions() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(0.01..1.0f64).prop_map(|p| {
            let s: f64 = p.iter().sum();
            p.map(|v| v / s)
        })
    }

    proptest! {
        #[test]
        fn baseline_on_simplex(p in proportions()) {
            let q = null_baseline_quality(&p).unwrap().to_array();
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn utility_linear(u in utilities(), m in 1u64..1000, k in 0.1..10.0f64) {
            let q = QualityVector::new(0.4, 0.2, 0.1, 0.3).unwrap();
            let e1 = expected_utility(&q, &u, m);
            let e2 = expected_utility(&q, &u, 2 * m);
            prop_assert!((e2 - 2.0 * e1).abs() <= 1e-9 * e1.abs().max(1.0));
            let scaled = UtilityTable { u_fn: u.u_fn * k, ..u };
            let d = expected_utility(&q, &scaled, m) - e1;
            prop_assert!((d - m as f64 * 0.1 * u.u_fn * (k - 1.0)).abs() <= 1e-9 * d.abs().max(1.0));
        }

        #[test]
        fn null_never_beaten_by_choice(u in utilities(), s in prop::collection::vec(0.0..=1.0f64, 1..8)) {
            let cfg = ValuationConfig::default();
            let cands: Vec<Candidate> = s.iter().enumerate()
                .map(|(i, &s)| Candidate { source_id: format!("S{i}"), similarity: s })
                .collect();
            let d = optimize_strategy(&monotone(), &cands, &u, &cfg).unwrap();
            let null_total = d.ranked.iter().find(|e| e.strategy.is_null()).unwrap().total;
            prop_assert!(d.best().total >= null_total);
            prop_assert_eq!(d.ranked.len(), cands.len() + 1);
        }

        #[test]
        fn choice_invariant_to_utility_scale(u in utilities(), k in 0.01..100.0f64, s in prop::collection::vec(0.0..=1.0f64, 1..8)) {
            let cfg = ValuationConfig::default();
            let cands: Vec<Candidate> = s.iter().enumerate()
                .map(|(i, &s)| Candidate { source_id: format!("S{i}"), similarity: s })
                .collect();
            let scaled = UtilityTable {
                u_true: u.u_true * k,
                u_fp: u.u_fp * k,
                u_fn: u.u_fn * k,
                u_fd: u.u_fd * k,
            };
            let a = optimize_strategy(&monotone(), &cands, &u, &cfg).unwrap();
            let b = optimize_strategy(&monotone(), &cands, &scaled, &cfg).unwrap();
            prop_assert_eq!(&a.best().strategy, &b.best().strategy);
        }

        #[test]
        fn monotone_model_picks_most_similar(u in utilities(), s in prop::collection::vec(0.0..=1.0f64, 1..8)) {
            let cfg = ValuationConfig::default();
            let cands: Vec<Candidate> = s.iter().enumerate()
                .map(|(i, &s)| Candidate { source_id: format!("S{i}"), similarity: s })
                .collect();
            let d = optimize_strategy(&monotone(), &cands, &u, &cfg).unwrap();
            let best = d.best();
            if !best.strategy.is_null() {
                let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(best.similarity, Some(top));
            }
        }
    }
}
