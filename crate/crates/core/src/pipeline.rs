//! End-to-end experiment: generate, transfer, fit weights, train, value.
//!
//! Every stage reads the artifacts of the previous ones from the output
//! directory, writes its own files with a `.partial` suffix, and renames them
//! only once the stage has succeeded. A lock file keeps concurrent runs out of
//! the same directory.
//!
//! The master seed seeds every stage: the generator (which derives one seed
//! per structure from it), the weight search, MLP initialisation and the
//! Dirichlet sampling behind intervals.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::efficacy::{
    predict_with_ci, train, EfficacySample, MlpModel, ModelFile, QualityPrediction, TrainConfig,
};
use crate::error::{Error, Result};
use crate::plot::BandPlot;
use crate::population::{AttributeScaler, Population, StructureAttributes};
use crate::similarity::{
    optimize_weights, similarity_matrix, similarity_to, SimilarityMatrix, SimilarityWeights,
    WeightFit, WeightSearchConfig,
};
use crate::surrogate::{
    generate_population, read_dataset_csv, write_dataset_csv, GeneratorConfig, ModalDataset,
};
use crate::transfer::{
    read_records_csv, run_pairwise_transfers, write_records_csv, TransferOptions, TransferRecord,
};
use crate::valuation::{
    evit_curve, optimize_strategy, Candidate, EvitSummary, UtilityTable, ValuationConfig,
};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "EVIT_SEED";
pub const LOCK_FILE: &str = ".evit.lock";

pub const MANIFEST: &str = "manifest.json";
pub const TRANSFERS: &str = "transfers.csv";
pub const WEIGHTS: &str = "weights.json";
pub const WEIGHTED_TRANSFERS: &str = "transfers_weighted.csv";
pub const MODEL: &str = "model.json";
pub const PREDICTION_CURVE: &str = "prediction_curve.csv";
pub const EVIT_CURVE: &str = "evit_curve.csv";
pub const EVIT_PLOT: &str = "evit.svg";
pub const RECOMMENDATION: &str = "recommendation.json";

const QUALITY_NAMES: [&str; 4] = ["tr", "fpr", "fnr", "fdr"];
const QUALITY_LABELS: [&str; 4] = ["TR", "FPR", "FNR", "FDR"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// JSON array of structure attributes; the built-in population if unset.
    pub population_file: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub generator: GeneratorConfig,
    pub transfer: TransferOptions,
    pub weights: WeightSearchConfig,
    pub train: TrainConfig,
    pub valuation: ValuationConfig,
    pub utilities: UtilityTable,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            population_file: None,
            output_dir: PathBuf::from("evit-output"),
            generator: GeneratorConfig::default(),
            transfer: TransferOptions::default(),
            weights: WeightSearchConfig::default(),
            train: TrainConfig::default(),
            valuation: ValuationConfig::default(),
            utilities: UtilityTable::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(p) = &cfg.population_file {
            if p.is_relative() {
                cfg.population_file = Some(base.join(p));
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    /// Flags override `EVIT_SEED`, which overrides the file, which overrides
    /// the defaults.
    pub fn resolve(
        config_path: Option<&Path>,
        seed_flag: Option<u64>,
        out_flag: Option<PathBuf>,
    ) -> Result<Self> {
        let mut cfg = match config_path {
            Some(p) => Self::from_json_file(p)?,
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("not an unsigned integer: `{v}`")))?;
        }
        if let Some(s) = seed_flag {
            cfg.seed = s;
        }
        if let Some(o) = out_flag {
            cfg.output_dir = o;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.transfer.validate()?;
        self.weights.validate()?;
        self.train.validate()?;
        self.valuation.validate()?;
        self.utilities.validate()?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        Ok(())
    }

    pub fn population(&self) -> Result<Population> {
        match &self.population_file {
            Some(p) => Population::from_json_file(p),
            None => Ok(Population::builtin()),
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.seed,
            ..self.generator.clone()
        }
    }

    pub fn weight_search_config(&self) -> WeightSearchConfig {
        WeightSearchConfig {
            seed: self.seed,
            ..self.weights
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

/// Held for the lifetime of a run; removes the lock file on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked {
                dir: dir.to_path_buf(),
                lock: path,
            }),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Files written by one stage, renamed into place on success.
#[derive(Default)]
struct Staged {
    files: Vec<PathBuf>,
}

impl Staged {
    fn partial(&mut self, target: &Path) -> PathBuf {
        let mut name = target.as_os_str().to_owned();
        name.push(".partial");
        self.files.push(target.to_path_buf());
        PathBuf::from(name)
    }

    fn write(&mut self, target: &Path, contents: &str) -> Result<()> {
        let p = self.partial(target);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }

    fn write_json<T: Serialize>(&mut self, target: &Path, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
            path: target.to_path_buf(),
            source,
        })?;
        s.push('\n');
        self.write(target, &s)
    }

    fn commit(self) -> Result<()> {
        for target in self.files {
            let mut name = target.as_os_str().to_owned();
            name.push(".partial");
            fs::rename(&name, &target).map_err(|e| Error::io(&target, e))?;
        }
        Ok(())
    }
}

fn run_stage<T>(stage: &'static str, f: impl FnOnce(&mut Staged) -> Result<T>) -> Result<T> {
    let wrap = |e| Error::Stage {
        stage,
        source: Box::new(e),
    };
    let mut staged = Staged::default();
    let out = f(&mut staged).map_err(wrap)?;
    staged.commit().map_err(wrap)?;
    Ok(out)
}

fn require(path: PathBuf, hint: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact {
            path,
            hint: hint.to_string(),
        })
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_csv(
    staged: &mut Staged,
    target: &Path,
    header: &[String],
    rows: &[Vec<f64>],
) -> Result<()> {
    let p = staged.partial(target);
    let csv_err = |source| Error::Csv {
        path: p.clone(),
        source,
    };
    let mut w = csv::Writer::from_path(&p).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string()))
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&p, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub structure_id: String,
    /// Relative to the output directory.
    pub file: String,
    pub seed: u64,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub structures: Vec<ManifestEntry>,
}

fn generate_stage(cfg: &ExperimentConfig, pop: &Population) -> Result<Manifest> {
    run_stage("generate", |staged| {
        let out = &cfg.output_dir;
        let data_dir = out.join("data");
        fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
        let generator = cfg.generator_config();
        let mut structures = Vec::new();
        for (ds, seed) in generate_population(pop.members(), &generator)? {
            let file = format!("data/{}.csv", ds.structure_id);
            let target = out.join(&file);
            let p = staged.partial(&target);
            write_dataset_csv(&ds, &p)?;
            structures.push(ManifestEntry {
                structure_id: ds.structure_id.clone(),
                file,
                seed,
                rows: ds.labels.len(),
            });
        }
        let manifest = Manifest {
            seed: cfg.seed,
            generator,
            structures,
        };
        staged.write_json(&out.join(MANIFEST), &manifest)?;
        Ok(manifest)
    })
}

fn load_datasets(cfg: &ExperimentConfig, pop: &Population) -> Result<Vec<ModalDataset>> {
    let out = &cfg.output_dir;
    let manifest: Manifest = read_json(&require(out.join(MANIFEST), "run `evit generate` first")?)?;
    let ids: Vec<&str> = manifest
        .structures
        .iter()
        .map(|s| s.structure_id.as_str())
        .collect();
    if ids != pop.ids().collect::<Vec<_>>() {
        return Err(Error::invalid(
            "manifest structures do not match the configured population; rerun `evit generate`",
        ));
    }
    manifest
        .structures
        .iter()
        .map(|s| read_dataset_csv(&require(out.join(&s.file), "run `evit generate` first")?))
        .collect()
}

fn encoded_matrix(pop: &Population, w: &SimilarityWeights) -> Result<SimilarityMatrix> {
    let scaler = AttributeScaler::fit(pop.members())?;
    let enc = pop
        .members()
        .iter()
        .map(|m| scaler.encode(m))
        .collect::<Result<Vec<_>>>()?;
    similarity_matrix(&enc, w)
}

fn transfers_stage(cfg: &ExperimentConfig, pop: &Population) -> Result<Vec<TransferRecord>> {
    run_stage("transfers", |staged| {
        let datasets = load_datasets(cfg, pop)?;
        let sim = encoded_matrix(pop, &SimilarityWeights::equal())?;
        let records = run_pairwise_transfers(&datasets, |s, t| sim.get(s, t), &cfg.transfer)?;
        let p = staged.partial(&cfg.output_dir.join(TRANSFERS));
        write_records_csv(&records, &p)?;
        Ok(records)
    })
}

fn rescore(
    records: &[TransferRecord],
    pop: &Population,
    sim: &SimilarityMatrix,
) -> Result<Vec<TransferRecord>> {
    records
        .iter()
        .map(|r| {
            let idx = |id: &str| {
                pop.index_of(id).ok_or_else(|| {
                    Error::invalid(format!("record refers to unknown structure `{id}`"))
                })
            };
            Ok(TransferRecord {
                similarity: sim.get(idx(&r.source_id)?, idx(&r.target_id)?),
                ..r.clone()
            })
        })
        .collect()
}

fn weights_stage(
    cfg: &ExperimentConfig,
    pop: &Population,
) -> Result<(WeightFit, Vec<TransferRecord>)> {
    run_stage("weights", |staged| {
        let out = &cfg.output_dir;
        let records =
            read_records_csv(&require(out.join(TRANSFERS), "run `evit transfers` first")?)?;
        let scaler = AttributeScaler::fit(pop.members())?;
        let enc = pop
            .members()
            .iter()
            .map(|m| scaler.encode(m))
            .collect::<Result<Vec<_>>>()?;
        let ids: Vec<&str> = pop.ids().collect();
        let fit = optimize_weights(&records, &ids, &enc, &cfg.weight_search_config())?;
        let weighted = rescore(&records, pop, &similarity_matrix(&enc, &fit.weights)?)?;
        staged.write_json(&out.join(WEIGHTS), &fit.to_file())?;
        let p = staged.partial(&out.join(WEIGHTED_TRANSFERS));
        write_records_csv(&weighted, &p)?;
        Ok((fit, weighted))
    })
}

fn samples_of(records: &[TransferRecord]) -> Vec<EfficacySample> {
    records.iter().map(EfficacySample::from).collect()
}

/// Mean and sampled interval of each quality component over `grid`. Grid
/// point `g` samples with seed `seed + g`.
pub fn prediction_curve(
    model: &MlpModel,
    grid: &[f64],
    valuation: &ValuationConfig,
    seed: u64,
) -> Result<Vec<QualityPrediction>> {
    grid.iter()
        .enumerate()
        .map(|(g, &s)| {
            predict_with_ci(
                model,
                s,
                valuation.samples,
                valuation.level,
                seed.wrapping_add(g as u64),
            )
        })
        .collect()
}

fn prediction_header() -> Vec<String> {
    let mut h = vec!["sigma".to_string()];
    for n in QUALITY_NAMES {
        h.extend([format!("mean_{n}"), format!("lo_{n}"), format!("hi_{n}")]);
    }
    h
}

fn fit_stage(cfg: &ExperimentConfig) -> Result<MlpModel> {
    run_stage("fit", |staged| {
        let out = &cfg.output_dir;
        let records = read_records_csv(&require(
            out.join(WEIGHTED_TRANSFERS),
            "run `evit weights` first",
        )?)?;
        let train_cfg = cfg.train_config();
        let trained = train(&samples_of(&records), &train_cfg)?;
        staged.write_json(
            &out.join(MODEL),
            &ModelFile::new(&trained.model, &train_cfg),
        )?;
        let curve = prediction_curve(&trained.model, &train_cfg.grid(), &cfg.valuation, cfg.seed)?;
        let rows: Vec<Vec<f64>> = curve
            .iter()
            .map(|p| {
                let mut r = vec![p.similarity];
                for k in 0..4 {
                    r.extend([p.mean[k], p.lower[k], p.upper[k]]);
                }
                r
            })
            .collect();
        write_csv(
            staged,
            &out.join(PREDICTION_CURVE),
            &prediction_header(),
            &rows,
        )?;
        Ok(trained.model)
    })
}

fn load_model(out: &Path) -> Result<(MlpModel, TrainConfig)> {
    let file: ModelFile = read_json(&require(out.join(MODEL), "run `evit fit` first")?)?;
    let train_cfg = file.config.clone();
    Ok((file.into_model()?, train_cfg))
}

fn evit_stage(cfg: &ExperimentConfig) -> Result<Vec<EvitSummary>> {
    run_stage("evit", |staged| {
        let out = &cfg.output_dir;
        let (model, train_cfg) = load_model(out)?;
        let records = read_records_csv(&require(
            out.join(WEIGHTED_TRANSFERS),
            "run `evit weights` first",
        )?)?;
        let grid = train_cfg.grid();
        let curve = evit_curve(&model, &grid, &cfg.utilities, &cfg.valuation, cfg.seed)?;
        let rows: Vec<Vec<f64>> = curve
            .iter()
            .map(|e| vec![e.similarity, e.evit, e.lower, e.upper])
            .collect();
        let header = ["sigma", "evit_mean", "evit_lo", "evit_hi"].map(String::from);
        write_csv(staged, &out.join(EVIT_CURVE), &header, &rows)?;

        let quality = prediction_curve(&model, &grid, &cfg.valuation, cfg.seed)?;
        let pct = (cfg.valuation.level * 100.0).round();
        for k in 0..4 {
            let col = |f: fn(&QualityPrediction) -> [f64; 4]| {
                quality.iter().map(|p| f(p)[k]).collect::<Vec<_>>()
            };
            let points: Vec<(f64, f64)> = records
                .iter()
                .map(|r| (r.similarity, r.quality.to_array()[k]))
                .collect();
            let title = format!(
                "{} vs similarity, {pct}% interval (surrogate data)",
                QUALITY_LABELS[k]
            );
            let svg = BandPlot {
                title: &title,
                x_label: "similarity",
                y_label: QUALITY_LABELS[k],
                x: &grid,
                mean: &col(|p| p.mean),
                lower: &col(|p| p.lower),
                upper: &col(|p| p.upper),
                points: &points,
                y_range: Some((0.0, 1.0)),
            }
            .render();
            staged.write(&out.join(format!("quality_{}.svg", QUALITY_NAMES[k])), &svg)?;
        }
        let title = format!("EVIT vs similarity, {pct}% interval (surrogate data)");
        let svg = BandPlot {
            title: &title,
            x_label: "similarity",
            y_label: "EVIT (utiles)",
            x: &grid,
            mean: &curve.iter().map(|e| e.evit).collect::<Vec<_>>(),
            lower: &curve.iter().map(|e| e.lower).collect::<Vec<_>>(),
            upper: &curve.iter().map(|e| e.upper).collect::<Vec<_>>(),
            points: &[],
            y_range: None,
        }
        .render();
        staged.write(&out.join(EVIT_PLOT), &svg)?;
        Ok(curve)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedStrategy {
    /// `nca` or `null_transfer`.
    pub strategy: String,
    pub source_id: Option<String>,
    pub similarity: Option<f64>,
    pub evit: f64,
    pub transfer_cost: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recommendation {
    pub target_id: String,
    pub candidates: Vec<RankedStrategy>,
    /// Best-ranked entry.
    pub chosen: RankedStrategy,
}

fn recommend_stage(
    cfg: &ExperimentConfig,
    pop: &Population,
    target: &StructureAttributes,
) -> Result<Recommendation> {
    run_stage("recommend", |staged| {
        target.validate()?;
        let out = &cfg.output_dir;
        let (model, _) = load_model(out)?;
        let weights_path = require(out.join(WEIGHTS), "run `evit weights` first")?;
        let fit = WeightFit::from_file(&read_json(&weights_path)?)?;
        let scaler = AttributeScaler::fit(pop.members())?;
        let enc = pop
            .members()
            .iter()
            .map(|m| scaler.encode(m))
            .collect::<Result<Vec<_>>>()?;
        let max_d = similarity_matrix(&enc, &fit.weights)?.max_distance();
        let t = scaler.encode(target)?;
        let candidates: Vec<Candidate> = pop
            .members()
            .iter()
            .zip(&enc)
            .filter(|(m, _)| m.id != target.id)
            .map(|(m, e)| Candidate {
                source_id: m.id.clone(),
                similarity: similarity_to(&t, e, &fit.weights, max_d),
            })
            .collect();
        let decision = optimize_strategy(&model, &candidates, &cfg.utilities, &cfg.valuation)?;
        let ranked: Vec<RankedStrategy> = decision
            .ranked
            .iter()
            .map(|e| RankedStrategy {
                strategy: match e.strategy.algorithm() {
                    crate::transfer::TransferAlgorithm::Nca => "nca".into(),
                    crate::transfer::TransferAlgorithm::NullTransfer => "null_transfer".into(),
                },
                source_id: e.strategy.source().map(String::from),
                similarity: e.similarity,
                evit: e.evit,
                transfer_cost: e.transfer_cost,
                total: e.total,
            })
            .collect();
        let rec = Recommendation {
            target_id: target.id.clone(),
            chosen: ranked[0].clone(),
            candidates: ranked,
        };
        staged.write_json(&out.join(RECOMMENDATION), &rec)?;
        Ok(rec)
    })
}

pub fn run_generate(cfg: &ExperimentConfig) -> Result<Manifest> {
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    generate_stage(cfg, &cfg.population()?)
}

pub fn run_transfers(cfg: &ExperimentConfig) -> Result<Vec<TransferRecord>> {
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    transfers_stage(cfg, &cfg.population()?)
}

pub fn run_weights(cfg: &ExperimentConfig) -> Result<WeightFit> {
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    Ok(weights_stage(cfg, &cfg.population()?)?.0)
}

pub fn run_fit(cfg: &ExperimentConfig) -> Result<MlpModel> {
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    fit_stage(cfg)
}

pub fn run_evit(cfg: &ExperimentConfig) -> Result<Vec<EvitSummary>> {
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    evit_stage(cfg)
}

/// Reads the target's attributes from a JSON object and ranks strategies.
pub fn run_recommend(cfg: &ExperimentConfig, target_file: &Path) -> Result<Recommendation> {
    let target: StructureAttributes = read_json(target_file)?;
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    recommend_stage(cfg, &cfg.population()?, &target)
}

/// What a full run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub output_dir: PathBuf,
    pub structures: usize,
    pub records: usize,
    pub weights: WeightFit,
    pub evit_at_one: f64,
    /// Similarity at which the EVIT curve peaks.
    pub evit_argmax: f64,
    pub min_evit: f64,
    pub target_size: u64,
    pub lambda_mono: f64,
    pub k: usize,
    pub seed: u64,
}

impl std::fmt::Display for PipelineSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let w = self.weights.weights.as_array();
        writeln!(f, "output                {}", self.output_dir.display())?;
        writeln!(f, "seed                  {}", self.seed)?;
        writeln!(f, "structures            {}", self.structures)?;
        writeln!(f, "transfer records      {}", self.records)?;
        writeln!(
            f,
            "weights (topo, scale, E, rho)  {:.4} {:.4} {:.4} {:.4}",
            w[0], w[1], w[2], w[3]
        )?;
        writeln!(
            f,
            "pearson r             {:.4} (equal weights {:.4})",
            self.weights.pearson_r, self.weights.baseline_r
        )?;
        writeln!(f, "EVIT at similarity 1  {:.2}", self.evit_at_one)?;
        writeln!(f, "EVIT peak at          {:.2}", self.evit_argmax)?;
        writeln!(f, "min EVIT on grid      {:.2}", self.min_evit)?;
        write!(
            f,
            "defaults              M={} lambda_mono={} k={}",
            self.target_size, self.lambda_mono, self.k
        )
    }
}

/// generate, transfers, weights, fit and evit in sequence.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineSummary> {
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let pop = cfg.population()?;
    generate_stage(cfg, &pop)?;
    let records = transfers_stage(cfg, &pop)?;
    let (fit, _) = weights_stage(cfg, &pop)?;
    fit_stage(cfg)?;
    let curve = evit_stage(cfg)?;
    let last = curve.last().expect("grid has at least two points");
    let peak = curve
        .iter()
        .fold(last, |best, e| if e.evit > best.evit { e } else { best });
    Ok(PipelineSummary {
        output_dir: cfg.output_dir.clone(),
        structures: pop.len(),
        records: records.len(),
        weights: fit,
        evit_at_one: last.evit,
        evit_argmax: peak.similarity,
        min_evit: curve.iter().map(|e| e.evit).fold(f64::INFINITY, f64::min),
        target_size: cfg.valuation.target_size,
        lambda_mono: cfg.train.lambda_mono,
        k: cfg.transfer.k,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            output_dir: dir.to_path_buf(),
            ..Default::default()
        };
        cfg.generator.samples_per_class = 10;
        cfg.weights.starts = 4;
        cfg.train.epochs = 50;
        cfg.valuation.samples = 200;
        cfg
    }

    #[test]
    fn stage_without_inputs_names_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick(dir.path());
        match run_fit(&cfg) {
            Err(Error::Stage { stage, source }) => {
                assert_eq!(stage, "fit");
                match *source {
                    Error::MissingArtifact { path, .. } => {
                        assert_eq!(path, dir.path().join(WEIGHTED_TRANSFERS))
                    }
                    other => panic!("{other:?}"),
                }
            }
            other => panic!("{other:?}"),
        }
        assert!(!dir.path().join(LOCK_FILE).exists());
    }

    #[test]
    fn lock_excludes_second_run() {
        let dir = tempfile::tempdir().unwrap();
        let _held = DirLock::acquire(dir.path()).unwrap();
        let cfg = quick(dir.path());
        assert!(matches!(run_generate(&cfg), Err(Error::Locked { .. })));
    }

    #[test]
    fn failed_stage_leaves_partial_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick(dir.path());
        run_generate(&cfg).unwrap();
        // corrupt one dataset so the transfer stage fails after nothing is renamed
        fs::write(
            dir.path().join("data/G3.csv"),
            "structure_id,f1_hz,f2_hz,label\nG3,1,1,9\n",
        )
        .unwrap();
        assert!(matches!(
            run_transfers(&cfg),
            Err(Error::Stage {
                stage: "transfers",
                ..
            })
        ));
        assert!(!dir.path().join(TRANSFERS).exists());
    }

    #[test]
    fn full_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick(dir.path());
        let summary = run_pipeline(&cfg).unwrap();
        assert_eq!(summary.records, 56);
        for f in [
            MANIFEST,
            TRANSFERS,
            WEIGHTS,
            WEIGHTED_TRANSFERS,
            MODEL,
            PREDICTION_CURVE,
            EVIT_CURVE,
            EVIT_PLOT,
            "quality_tr.svg",
            "quality_fdr.svg",
            "data/G8.csv",
        ] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let pc = fs::read_to_string(dir.path().join(PREDICTION_CURVE)).unwrap();
        assert!(pc.starts_with("sigma,mean_tr,lo_tr,hi_tr,mean_fpr,"));
        assert_eq!(pc.lines().count(), 102);
        let ec = fs::read_to_string(dir.path().join(EVIT_CURVE)).unwrap();
        assert!(ec.starts_with("sigma,evit_mean,evit_lo,evit_hi\n"));
        let svg = fs::read_to_string(dir.path().join("quality_tr.svg")).unwrap();
        assert!(svg.contains("surrogate data"));
        assert_eq!(svg.matches("<circle").count(), 56);
        let w: serde_json::Value = read_json(&dir.path().join(WEIGHTS)).unwrap();
        for k in [
            "w_topology",
            "w_scale",
            "w_youngs_modulus",
            "w_density",
            "pearson_r",
        ] {
            assert!(w.get(k).is_some(), "{k}");
        }
        let leftovers: Vec<_> = walk(dir.path())
            .into_iter()
            .filter(|p| p.to_string_lossy().ends_with(".partial"))
            .collect();
        assert!(leftovers.is_empty(), "{leftovers:?}");

        // recommendation against the trained artifacts
        let target = dir.path().join("target.json");
        fs::write(
            &target,
            r#"{"id":"new","topology":"base","scale":"large","material":"steel","youngs_modulus_gpa":200,"density_kg_m3":8000}"#,
        )
        .unwrap();
        let rec = run_recommend(&cfg, &target).unwrap();
        assert_eq!(rec.candidates.len(), 9);
        let g8 = rec
            .candidates
            .iter()
            .find(|c| c.source_id.as_deref() == Some("G8"))
            .unwrap();
        assert_eq!(g8.similarity, Some(1.0));
        assert!(dir.path().join(RECOMMENDATION).is_file());
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn config_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(
            &path,
            r#"{"seed": 7, "output_dir": "runs", "generator": {"samples_per_class": 20}}"#,
        )
        .unwrap();
        let cfg = ExperimentConfig::from_json_file(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.output_dir, dir.path().join("runs"));
        assert_eq!(cfg.generator.samples_per_class, 20);
        assert_eq!(
            cfg.generator.noise_fraction,
            GeneratorConfig::default().noise_fraction
        );
        // the flag beats the file (the environment is left alone here)
        let cfg =
            ExperimentConfig::resolve(Some(&path), Some(3), Some(dir.path().join("x"))).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.output_dir, dir.path().join("x"));
    }

    #[test]
    fn unknown_config_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"sede": 7}"#).unwrap();
        assert!(matches!(
            ExperimentConfig::from_json_file(&path),
            Err(Error::Json { .. })
        ));
    }

    #[test]
    fn invalid_noise_names_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.generator.noise_fraction = 0.5;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "generator.noise_fraction"),
            other => panic!("{other:?}"),
        }
    }
}
