//! Run configuration and the commands behind the `mfcast` binary.
//!
//! Every command is a pure function of the [`RunConfig`]: re-running with
//! the same file rewrites byte-identical outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{gen_synthetic, load_csv, write_csv, RawSeries, SynthConfig};
use crate::error::{Error, Result};
use crate::evalx::{emit_report, dm_test, EvalResult, Evaluator, GridSpec, HorizonData, Method, ModelStore, OracleSpec, QSweepRow};
use crate::missingness::MissingPattern;
use crate::models::{Family, ModelSpec};
use crate::partition::{fixed_partition, learn_partition, Artifact, PartitionConfig, UncertaintySet};
use crate::training::{train_nominal, TrainConfig, TrainData};

/// Exit codes of the binary.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Training { .. } => EXIT_RUNTIME,
        e if e.is_data_error() => EXIT_DATA,
        Error::Size(_) | Error::Index(_) => EXIT_DATA,
        _ => EXIT_RUNTIME,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Synth(SynthConfig),
    Csv { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Share of rows used for fitting plus validation; the rest is test.
    pub train_frac: f64,
    /// Share of the training block held out for validation (its tail).
    pub val_frac: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_frac: 0.8,
            val_frac: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::Lr,
            hidden: vec![50; 4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Fixed,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub mode: PartitionMode,
    pub max_subsets: usize,
    pub epsilon: f64,
    /// Missing-feature budget; all maskable features when absent.
    pub budget: Option<usize>,
}

impl Default for PartitionSection {
    fn default() -> Self {
        let d = PartitionConfig::default();
        Self {
            mode: PartitionMode::Learned,
            max_subsets: d.max_subsets,
            epsilon: d.epsilon,
            budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QCell {
    pub h: usize,
    pub p01: f64,
    pub p11: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub p01: Vec<f64>,
    pub p11: Vec<f64>,
    pub runs: usize,
    pub methods: Vec<Method>,
    /// Subset counts for the sensitivity sweep; empty disables it.
    pub q_sweep: Vec<usize>,
    /// Cell for the sweep; defaults to the first horizon with the largest
    /// transition probabilities.
    pub q_cell: Option<QCell>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            p01: vec![0.05, 0.1, 0.2],
            p11: vec![0.0, 0.8, 0.9],
            runs: 10,
            methods: vec![Method::ImpPersistence, Method::ImpMean, Method::RfLearned, Method::ArfLearned],
            q_sweep: Vec::new(),
            q_cell: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub target_plant: usize,
    pub max_lag: usize,
    pub horizons: Vec<usize>,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub adaptive: bool,
    pub train: TrainConfig,
    pub partition: PartitionSection,
    pub grid: Option<GridSection>,
    pub output_dir: PathBuf,
    /// Base seed for training and missingness simulation.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            target_plant: 0,
            max_lag: 2,
            horizons: vec![1],
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            adaptive: true,
            train: TrainConfig::default(),
            partition: PartitionSection::default(),
            grid: None,
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::Config("horizons must be a non-empty list of positive steps".into()));
        }
        let mut hs = self.horizons.clone();
        hs.sort_unstable();
        hs.dedup();
        if hs.len() != self.horizons.len() {
            return Err(Error::Config("horizons must be distinct".into()));
        }
        for (name, f) in [("train_frac", self.split.train_frac), ("val_frac", self.split.val_frac)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} {f} outside (0, 1)")));
            }
        }
        if let DataSource::Synth(s) = &self.data {
            s.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.train.validate()?;
        self.partition_config().validate()?;
        if let Some(g) = &self.grid {
            self.grid_spec(g).validate()?;
            if g.q_sweep.contains(&0) {
                return Err(Error::Config("q_sweep values must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn partition_config(&self) -> PartitionConfig {
        PartitionConfig {
            max_subsets: self.partition.max_subsets,
            epsilon: self.partition.epsilon,
        }
    }

    pub fn spec(&self, adaptive: bool) -> ModelSpec {
        ModelSpec {
            family: self.model.family,
            hidden: match self.model.family {
                Family::Lr => Vec::new(),
                Family::Nn => self.model.hidden.clone(),
            },
            adaptive,
        }
    }

    pub fn grid_spec(&self, g: &GridSection) -> GridSpec {
        GridSpec {
            p01: g.p01.clone(),
            p11: g.p11.clone(),
            horizons: self.horizons.clone(),
            methods: g.methods.clone(),
            runs: g.runs,
            seed: self.seed,
        }
    }

    fn sweep_method(&self) -> Method {
        if self.adaptive {
            Method::ArfLearned
        } else {
            Method::RfLearned
        }
    }

    /// Methods that need a trained artifact.
    pub fn artifact_methods(&self) -> Vec<Method> {
        let mut out: Vec<Method> = match &self.grid {
            Some(g) => g.methods.iter().copied().filter(|m| m.uses_artifact()).collect(),
            None => vec![match (self.partition.mode, self.adaptive) {
                (PartitionMode::Fixed, false) => Method::RfFixed,
                (PartitionMode::Fixed, true) => Method::ArfFixed,
                (PartitionMode::Learned, false) => Method::RfLearned,
                (PartitionMode::Learned, true) => Method::ArfLearned,
            }],
        };
        if self.grid.as_ref().is_some_and(|g| !g.q_sweep.is_empty()) {
            out.push(self.sweep_method());
        }
        out.sort();
        out.dedup();
        out
    }

    pub fn artifact_dir(&self) -> PathBuf {
        self.output_dir.join("artifacts")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.output_dir.join("report")
    }
}

pub fn load_series(cfg: &RunConfig) -> Result<RawSeries> {
    match &cfg.data {
        DataSource::Synth(s) => gen_synthetic(s),
        DataSource::Csv { path } => load_csv(path),
    }
}

fn horizon_data(cfg: &RunConfig, raw: &RawSeries) -> Result<BTreeMap<usize, HorizonData>> {
    cfg.horizons
        .iter()
        .map(|&h| {
            Ok((
                h,
                HorizonData::build(raw, cfg.target_plant, cfg.max_lag, h, cfg.split.train_frac, cfg.split.val_frac)?,
            ))
        })
        .collect()
}

fn nominal_path(dir: &Path, h: usize) -> PathBuf {
    dir.join(format!("nominal_h{h}.json"))
}

fn artifact_path(dir: &Path, m: Method, h: usize) -> PathBuf {
    dir.join(format!("{m}_h{h}.json"))
}

fn sweep_path(dir: &Path, m: Method, h: usize) -> PathBuf {
    dir.join(format!("{m}_h{h}_qmax.json"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the configured series to `<output_dir>/data.csv`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let raw = load_series(cfg)?;
    ensure_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("data.csv");
    write_csv(&raw, &path)?;
    Ok(path)
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub files: Vec<PathBuf>,
    /// `(label, table)` for every learned partition.
    pub bounds_tables: Vec<(String, String)>,
}

/// Trains the nominal model per horizon plus every partition artifact the
/// configuration asks for, and writes them under `<output_dir>/artifacts`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let raw = load_series(cfg)?;
    let horizons = horizon_data(cfg, &raw)?;
    let dir = cfg.artifact_dir();
    ensure_dir(&dir)?;
    let tcfg = cfg.train_config();
    let pcfg = cfg.partition_config();
    let sweep_max = cfg
        .grid
        .as_ref()
        .and_then(|g| g.q_sweep.iter().copied().max())
        .unwrap_or(0);

    let mut jobs: Vec<(Option<Method>, usize)> = cfg.horizons.iter().map(|&h| (None, h)).collect();
    for m in cfg.artifact_methods() {
        for &h in &cfg.horizons {
            jobs.push((Some(m), h));
        }
    }

    let trained: Vec<(Option<Method>, usize, Artifact)> = jobs
        .par_iter()
        .map(|&(m, h)| {
            let hd = &horizons[&h];
            let (train, val) = (hd.train(), hd.val());
            let data = TrainData::new(&train, &val)?;
            let p = train.n_features();
            let budget = cfg.partition.budget.unwrap_or(train.maskable.len());
            let u = UncertaintySet::new(p, train.maskable.clone(), budget)?;
            let art = match m {
                None => {
                    let out = train_nominal(data, &MissingPattern::zeros(p), &tcfg, &cfg.spec(false), None)?;
                    Artifact::Single { params: out.params }
                }
                Some(m @ (Method::RfFixed | Method::ArfFixed)) => {
                    let spec = cfg.spec(m == Method::ArfFixed);
                    Artifact::Fixed(fixed_partition(data, &u, &tcfg, &spec)?)
                }
                Some(m @ (Method::RfLearned | Method::ArfLearned)) => {
                    let spec = cfg.spec(m == Method::ArfLearned);
                    let q = if m == cfg.sweep_method() {
                        pcfg.max_subsets.max(sweep_max)
                    } else {
                        pcfg.max_subsets
                    };
                    let deep = PartitionConfig {
                        max_subsets: q,
                        ..pcfg.clone()
                    };
                    Artifact::Learned(learn_partition(data, &u, &deep, &tcfg, &spec)?)
                }
                Some(other) => {
                    return Err(Error::Config(format!("method {other} has no trainable artifact")));
                }
            };
            Ok((m, h, art))
        })
        .collect::<Result<_>>()?;

    let mut summary = TrainSummary::default();
    for (m, h, art) in trained {
        match m {
            None => {
                let path = nominal_path(&dir, h);
                art.save(&path)?;
                summary.files.push(path);
            }
            Some(m) => {
                let deployed = match &art {
                    Artifact::Learned(p) => {
                        let truncated = p.truncate(pcfg.max_subsets)?;
                        if truncated.records.len() < p.records.len() {
                            let path = sweep_path(&dir, m, h);
                            art.save(&path)?;
                            summary.files.push(path);
                        }
                        let table = truncated.bounds_table();
                        let tpath = dir.join(format!("{m}_h{h}_bounds.txt"));
                        write_text(&tpath, &table)?;
                        summary.files.push(tpath);
                        summary.bounds_tables.push((format!("{m} h={h}"), table));
                        Artifact::Learned(truncated)
                    }
                    _ => art,
                };
                let path = artifact_path(&dir, m, h);
                deployed.save(&path)?;
                summary.files.push(path);
            }
        }
    }
    Ok(summary)
}

/// Everything `cmd_evaluate` computed; saved as `report/eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBundle {
    pub result: EvalResult,
    pub qsweep: Vec<QSweepRow>,
}

fn load_artifact(path: &Path) -> Result<Artifact> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "artifact {} not found; run `train` first",
            path.display()
        )));
    }
    Artifact::load(path)
}

/// Runs the grid (and the Q sweep when configured) on trained artifacts and
/// writes the CSV reports plus `eval.json` under `<output_dir>/report`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalBundle> {
    cfg.validate()?;
    let g = cfg
        .grid
        .clone()
        .ok_or_else(|| Error::Config("evaluate needs a `grid` section".into()))?;
    let raw = load_series(cfg)?;
    let horizons = horizon_data(cfg, &raw)?;
    let dir = cfg.artifact_dir();

    let mut store = ModelStore::default();
    for &h in &cfg.horizons {
        match load_artifact(&nominal_path(&dir, h))? {
            Artifact::Single { params } => {
                store.nominal.insert(h, params);
            }
            _ => return Err(Error::Config(format!("nominal_h{h}.json is not a single model"))),
        }
        for &m in g.methods.iter().filter(|m| m.uses_artifact()) {
            store.artifacts.insert((m, h), load_artifact(&artifact_path(&dir, m, h))?);
        }
    }
    let oracle = g.methods.contains(&Method::RetrainOracle).then(|| OracleSpec {
        train: cfg.train_config(),
        spec: cfg.spec(false),
    });
    let evaluator = Evaluator::new(&raw, horizons, &store, oracle);
    let result = evaluator.run_grid(&cfg.grid_spec(&g))?;

    let mut qsweep = Vec::new();
    if !g.q_sweep.is_empty() {
        let cell = g.q_cell.clone().unwrap_or_else(|| QCell {
            h: cfg.horizons[0],
            p01: g.p01.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            p11: g.p11.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
        let m = cfg.sweep_method();
        let deep_path = sweep_path(&dir, m, cell.h);
        let deep = if deep_path.exists() {
            load_artifact(&deep_path)?
        } else {
            load_artifact(&artifact_path(&dir, m, cell.h))?
        };
        let Artifact::Learned(tree) = deep else {
            return Err(Error::Config(format!("{m} artifact is not a learned partition")));
        };
        let parts = g
            .q_sweep
            .iter()
            .map(|&q| Ok((q, Artifact::Learned(tree.truncate(q)?))))
            .collect::<Result<Vec<_>>>()?;
        qsweep = evaluator.q_sweep(&parts, cell.h, cell.p01, cell.p11, g.runs, cfg.seed)?;
    }

    let bundle = EvalBundle { result, qsweep };
    let rdir = cfg.report_dir();
    emit_report(&bundle.result, &bundle.qsweep, &rdir)?;
    write_text(&rdir.join("eval.json"), &serde_json::to_string(&bundle)?)?;
    Ok(bundle)
}

/// Rebuilds the CSV reports from `report/eval.json` and adds `dm.csv`:
/// every method against persistence imputation (or the first method) per
/// cell, on run-averaged squared errors.
pub fn cmd_report(cfg: &RunConfig) -> Result<PathBuf> {
    let rdir = cfg.report_dir();
    let path = rdir.join("eval.json");
    let text = fs::read_to_string(&path).map_err(|_| {
        Error::Config(format!("{} not found; run `evaluate` first", path.display()))
    })?;
    let bundle: EvalBundle = serde_json::from_str(&text)?;
    emit_report(&bundle.result, &bundle.qsweep, &rdir)?;

    let summary = bundle.result.summary();
    let mut methods: Vec<Method> = summary.iter().map(|s| s.method).collect();
    methods.dedup();
    let reference = if methods.contains(&Method::ImpPersistence) {
        Method::ImpPersistence
    } else {
        methods[0]
    };
    let mut lines = vec!["method,reference,h,p01,p11,statistic,p_value,degenerate".to_string()];
    for s in summary.iter().filter(|s| s.method != reference) {
        let (Some(a), Some(b)) = (
            bundle.result.mean_sq_errors(s.method, s.h, s.p01, s.p11),
            bundle.result.mean_sq_errors(reference, s.h, s.p01, s.p11),
        ) else {
            continue;
        };
        let dm = dm_test(&a, &b)?;
        lines.push(format!(
            "{},{},{},{},{},{},{},{}",
            s.method, reference, s.h, s.p01, s.p11, dm.statistic, dm.p_value, dm.degenerate
        ));
    }
    let out = rdir.join("dm.csv");
    write_text(&out, &(lines.join("\n") + "\n"))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig {
            grid: Some(GridSection::default()),
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn minimal_json_uses_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"data": {"source": "csv", "path": "x.csv"}}"#).unwrap();
        assert_eq!(cfg.train.batch_size, 512);
        assert_eq!(cfg.partition.max_subsets, 10);
        assert_eq!(cfg.model.hidden, vec![50; 4]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"horizon": 3}"#).is_err());
    }

    #[test]
    fn invalid_values_map_to_config_exit() {
        let cfg = RunConfig {
            horizons: vec![],
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err();
        assert_eq!(exit_code(&err), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Parse { line: 3, msg: "x".into() }), EXIT_DATA);
        assert_eq!(
            exit_code(&Error::Training {
                subset: 1,
                source: Box::new(Error::Size("x".into()))
            }),
            EXIT_RUNTIME
        );
    }

    #[test]
    fn artifact_methods_follow_mode() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.artifact_methods(), vec![Method::ArfLearned]);
        cfg.partition.mode = PartitionMode::Fixed;
        cfg.adaptive = false;
        assert_eq!(cfg.artifact_methods(), vec![Method::RfFixed]);
    }
}
