//! Forecast scoring under simulated missingness.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataio::{build_supervised, split_bounds, Dataset, RawSeries, SplitBounds};
use crate::error::{Error, Result};
use crate::missingness::{expand_obs_mask, impute_persistence, simulate_markov, MeanImputer, MissingPattern, MissingnessConfig, ObsMaskSeries};
use crate::models::{forward, predict_rows, BatchAlpha, ModelParams, ModelSpec};
use crate::partition::Artifact;
use crate::training::{train_nominal, TrainConfig, TrainData};

/// Largest maskable set for which the retraining oracle is allowed.
pub const ORACLE_MAX_FEATURES: usize = 10;
/// Minimum series length accepted by [`dm_test`].
pub const DM_MIN_LEN: usize = 30;

/// Root mean squared error as a percentage of the mean actual value.
pub fn nrmse(preds: &[f64], actuals: &[f64]) -> Result<f64> {
    if preds.len() != actuals.len() || preds.is_empty() {
        return Err(Error::Size(format!(
            "nrmse needs equal non-empty series, got {} and {}",
            preds.len(),
            actuals.len()
        )));
    }
    let n = actuals.len() as f64;
    let mean = actuals.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(Error::Domain(format!("mean of actuals is {mean}, must be > 0")));
    }
    let mse = preds
        .iter()
        .zip(actuals)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / n;
    Ok(100.0 * mse.sqrt() / mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmResult {
    /// Mean of `loss_a - loss_b` over its HAC standard error. Positive means
    /// `a` has the larger loss.
    pub statistic: f64,
    /// Two-sided normal p-value.
    pub p_value: f64,
    /// Set when the loss differential has zero variance.
    pub degenerate: bool,
}

impl DmResult {
    /// p-value for the alternative "a has smaller expected loss than b".
    pub fn p_a_better(&self) -> f64 {
        normal().cdf(self.statistic)
    }

    /// p-value for the alternative "a has larger expected loss than b".
    pub fn p_a_worse(&self) -> f64 {
        normal().sf(self.statistic)
    }
}

fn normal() -> Normal {
    Normal::standard()
}

/// Newey–West truncation lag `floor(4 (n/100)^(2/9))`.
pub fn dm_default_lag(n: usize) -> usize {
    (4.0 * (n as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize
}

/// Diebold–Mariano comparison of two per-observation loss series with a
/// Bartlett-kernel HAC variance.
pub fn dm_test(loss_a: &[f64], loss_b: &[f64]) -> Result<DmResult> {
    dm_test_with_lag(loss_a, loss_b, dm_default_lag(loss_a.len()))
}

pub fn dm_test_with_lag(loss_a: &[f64], loss_b: &[f64], lag: usize) -> Result<DmResult> {
    if loss_a.len() != loss_b.len() || loss_a.len() < DM_MIN_LEN {
        return Err(Error::Size(format!(
            "DM test needs equal series of length >= {DM_MIN_LEN}, got {} and {}",
            loss_a.len(),
            loss_b.len()
        )));
    }
    let n = loss_a.len();
    let d: Vec<f64> = loss_a.iter().zip(loss_b).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let autocov = |k: usize| -> f64 {
        (k..n).map(|t| (d[t] - mean) * (d[t - k] - mean)).sum::<f64>() / n as f64
    };
    let lag = lag.min(n - 1);
    let mut lrv = autocov(0);
    for k in 1..=lag {
        lrv += 2.0 * (1.0 - k as f64 / (lag as f64 + 1.0)) * autocov(k);
    }
    let scale = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if !(lrv > 1e-24 * scale * scale) {
        let (statistic, p_value) = if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        };
        return Ok(DmResult {
            statistic,
            p_value,
            degenerate: true,
        });
    }
    let statistic = mean / (lrv / n as f64).sqrt();
    let p_value = (2.0 * normal().sf(statistic.abs())).clamp(0.0, 1.0);
    Ok(DmResult {
        statistic,
        p_value,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Last observed value carried forward, fed to the nominal model.
    ImpPersistence,
    /// Training-set column means, fed to the nominal model.
    ImpMean,
    RfFixed,
    RfLearned,
    ArfFixed,
    ArfLearned,
    /// One model retrained per realized pattern.
    RetrainOracle,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::ImpPersistence,
        Method::ImpMean,
        Method::RfFixed,
        Method::RfLearned,
        Method::ArfFixed,
        Method::ArfLearned,
        Method::RetrainOracle,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::ImpPersistence => "imp-persistence",
            Method::ImpMean => "imp-mean",
            Method::RfFixed => "rf-fixed",
            Method::RfLearned => "rf-learned",
            Method::ArfFixed => "arf-fixed",
            Method::ArfLearned => "arf-learned",
            Method::RetrainOracle => "retrain-oracle",
        }
    }

    /// Whether the method is served from a trained partition artifact.
    pub fn uses_artifact(self) -> bool {
        matches!(self, Method::RfFixed | Method::RfLearned | Method::ArfFixed | Method::ArfLearned)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub p01: Vec<f64>,
    pub p11: Vec<f64>,
    pub horizons: Vec<usize>,
    pub methods: Vec<Method>,
    pub runs: usize,
    pub seed: u64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p01.is_empty() || self.p11.is_empty() || self.horizons.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("grid lists must be non-empty".into()));
        }
        if self.runs == 0 {
            return Err(Error::Config("grid needs at least one run".into()));
        }
        for &p in self.p01.iter().chain(&self.p11) {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("transition probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mask seed for one cell and run: a pure function of its arguments, so the
/// same cell sees the same masks in the grid and in the Q sweep.
pub fn cell_seed(base: u64, h: usize, p01: f64, p11: f64, run: usize) -> u64 {
    [h as u64, p01.to_bits(), p11.to_bits(), run as u64]
        .into_iter()
        .fold(splitmix(base), |acc, v| splitmix(acc ^ v))
}

/// Supervised data for one horizon with its split.
#[derive(Debug, Clone)]
pub struct HorizonData {
    pub dataset: Dataset,
    pub bounds: SplitBounds,
}

impl HorizonData {
    pub fn build(raw: &RawSeries, target_plant: usize, max_lag: usize, h: usize, train_frac: f64, val_frac: f64) -> Result<Self> {
        let dataset = build_supervised(raw, target_plant, max_lag, h)?;
        let bounds = split_bounds(dataset.n_rows(), train_frac, val_frac)?;
        Ok(Self { dataset, bounds })
    }

    pub fn train(&self) -> Dataset {
        self.dataset.rows(0, self.bounds.train_end)
    }

    pub fn val(&self) -> Dataset {
        self.dataset.rows(self.bounds.train_end, self.bounds.val_end)
    }

    pub fn test(&self) -> Dataset {
        self.dataset.rows(self.bounds.val_end, self.bounds.n)
    }
}

/// Trained models the evaluation draws on.
#[derive(Debug, Clone, Default)]
pub struct ModelStore {
    /// Complete-data model per horizon (used by imputation and the oracle).
    pub nominal: BTreeMap<usize, ModelParams>,
    pub artifacts: BTreeMap<(Method, usize), Artifact>,
}

/// How the retraining oracle trains its per-pattern models.
#[derive(Debug, Clone)]
pub struct OracleSpec {
    pub train: TrainConfig,
    pub spec: ModelSpec,
}

pub struct Evaluator<'a> {
    raw: &'a RawSeries,
    horizons: BTreeMap<usize, HorizonData>,
    store: &'a ModelStore,
    oracle: Option<OracleSpec>,
    oracle_cache: Mutex<HashMap<(usize, MissingPattern), ModelParams>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: Method,
    pub h: usize,
    pub p01: f64,
    pub p11: f64,
    pub run: usize,
    pub nrmse: f64,
    /// Squared error per test observation.
    pub sq_errors: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub records: Vec<EvalRecord>,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        raw: &'a RawSeries,
        horizons: BTreeMap<usize, HorizonData>,
        store: &'a ModelStore,
        oracle: Option<OracleSpec>,
    ) -> Self {
        Self {
            raw,
            horizons,
            store,
            oracle,
            oracle_cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn horizon(&self, h: usize) -> Result<&HorizonData> {
        self.horizons
            .get(&h)
            .ok_or_else(|| Error::Config(format!("no data prepared for horizon {h}")))
    }

    fn nominal(&self, h: usize) -> Result<&ModelParams> {
        self.store
            .nominal
            .get(&h)
            .ok_or_else(|| Error::Config(format!("no nominal model for horizon {h}")))
    }

    fn check_ready(&self, method: Method, h: usize) -> Result<()> {
        let hd = self.horizon(h)?;
        match method {
            Method::ImpPersistence | Method::ImpMean => {
                self.nominal(h)?.check_compatible(&hd.dataset)?;
            }
            Method::RetrainOracle => {
                self.nominal(h)?.check_compatible(&hd.dataset)?;
                if self.oracle.is_none() {
                    return Err(Error::Config("retrain oracle requested without a training setup".into()));
                }
                if hd.dataset.maskable.len() > ORACLE_MAX_FEATURES {
                    return Err(Error::Config(format!(
                        "retrain oracle needs at most {ORACLE_MAX_FEATURES} maskable features, have {}",
                        hd.dataset.maskable.len()
                    )));
                }
            }
            m => {
                let art = self
                    .store
                    .artifacts
                    .get(&(m, h))
                    .ok_or_else(|| Error::Config(format!("no artifact for method {m} at horizon {h}")))?;
                art.representative().check_compatible(&hd.dataset)?;
            }
        }
        Ok(())
    }

    fn oracle_model(&self, h: usize, alpha: &MissingPattern) -> Result<ModelParams> {
        let nominal = self.nominal(h)?;
        if alpha.is_zero() {
            return Ok(nominal.clone());
        }
        let key = (h, alpha.clone());
        if let Some(p) = self.oracle_cache.lock().expect("oracle cache poisoned").get(&key) {
            return Ok(p.clone());
        }
        let o = self
            .oracle
            .as_ref()
            .ok_or_else(|| Error::Config("retrain oracle requested without a training setup".into()))?;
        let hd = self.horizon(h)?;
        let (train, val) = (hd.train(), hd.val());
        let out = train_nominal(TrainData::new(&train, &val)?, alpha, &o.train, &o.spec, Some(nominal))?;
        self.oracle_cache
            .lock()
            .expect("oracle cache poisoned")
            .insert(key, out.params.clone());
        Ok(out.params)
    }

    /// Test-split predictions of `method` under the plant-level `mask`.
    pub fn predict_test(&self, method: Method, h: usize, mask: &ObsMaskSeries) -> Result<Vec<f64>> {
        let hd = self.horizon(h)?;
        let full = &hd.dataset;
        let (start, end) = (hd.bounds.val_end, hd.bounds.n);
        let zero = MissingPattern::zeros(full.n_features());
        match method {
            Method::ImpPersistence => {
                let filled = impute_persistence(&self.raw.values, mask)?;
                let rebuilt = full.with_measurements_from(&filled)?;
                let x = rebuilt.x.slice_rows(start, end);
                predict_rows(self.nominal(h)?, &x, BatchAlpha::Shared(&zero))
            }
            Method::ImpMean => {
                let imputer = MeanImputer::fit(&hd.train());
                let patterns = expand_obs_mask(mask, &full.rows(start, end))?;
                let nominal = self.nominal(h)?;
                (start..end)
                    .zip(&patterns)
                    .map(|(i, a)| forward(nominal, &imputer.impute(full.x.row(i), a), &zero))
                    .collect()
            }
            Method::RetrainOracle => {
                let patterns = expand_obs_mask(mask, &full.rows(start, end))?;
                let mut models: BTreeMap<&MissingPattern, ModelParams> = BTreeMap::new();
                for a in &patterns {
                    if !models.contains_key(a) {
                        models.insert(a, self.oracle_model(h, a)?);
                    }
                }
                (start..end)
                    .zip(&patterns)
                    .map(|(i, a)| forward(&models[a], full.x.row(i), a))
                    .collect()
            }
            m => {
                let art = self
                    .store
                    .artifacts
                    .get(&(m, h))
                    .ok_or_else(|| Error::Config(format!("no artifact for method {m} at horizon {h}")))?;
                let patterns = expand_obs_mask(mask, &full.rows(start, end))?;
                (start..end)
                    .zip(&patterns)
                    .map(|(i, a)| art.predict(full.x.row(i), a))
                    .collect()
            }
        }
    }

    fn simulate(&self, base_seed: u64, h: usize, p01: f64, p11: f64, run: usize) -> Result<ObsMaskSeries> {
        let cfg = MissingnessConfig {
            p01,
            p11,
            seed: cell_seed(base_seed, h, p01, p11, run),
        };
        simulate_markov(&cfg, self.raw.n_periods(), self.raw.n_plants())
    }

    fn score(&self, preds: &[f64], h: usize) -> Result<(f64, Vec<f64>)> {
        let hd = self.horizon(h)?;
        let actual = &hd.dataset.y[hd.bounds.val_end..hd.bounds.n];
        let sq = preds.iter().zip(actual).map(|(p, y)| (p - y) * (p - y)).collect();
        Ok((nrmse(preds, actual)?, sq))
    }

    /// Evaluates every (method, h, p01, p11, run) combination of the grid.
    pub fn run_grid(&self, spec: &GridSpec) -> Result<EvalResult> {
        spec.validate()?;
        for &m in &spec.methods {
            for &h in &spec.horizons {
                self.check_ready(m, h)?;
            }
        }
        let mut jobs = Vec::new();
        for &h in &spec.horizons {
            for &p01 in &spec.p01 {
                for &p11 in &spec.p11 {
                    for run in 0..spec.runs {
                        jobs.push((h, p01, p11, run));
                    }
                }
            }
        }
        let per_job: Vec<Vec<EvalRecord>> = jobs
            .par_iter()
            .map(|&(h, p01, p11, run)| {
                let mask = self.simulate(spec.seed, h, p01, p11, run)?;
                spec.methods
                    .iter()
                    .map(|&method| {
                        let preds = self.predict_test(method, h, &mask)?;
                        let (nrmse, sq_errors) = self.score(&preds, h)?;
                        Ok(EvalRecord {
                            method,
                            h,
                            p01,
                            p11,
                            run,
                            nrmse,
                            sq_errors,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let mut records: Vec<EvalRecord> = per_job.into_iter().flatten().collect();
        records.sort_by(|a, b| {
            (a.method, a.h)
                .cmp(&(b.method, b.h))
                .then(a.p01.total_cmp(&b.p01))
                .then(a.p11.total_cmp(&b.p11))
                .then(a.run.cmp(&b.run))
        });
        Ok(EvalResult { records })
    }

    /// Scores a series of partitions (one per subset count) on one cell.
    pub fn q_sweep(
        &self,
        partitions: &[(usize, Artifact)],
        h: usize,
        p01: f64,
        p11: f64,
        runs: usize,
        seed: u64,
    ) -> Result<Vec<QSweepRow>> {
        if runs == 0 {
            return Err(Error::Config("Q sweep needs at least one run".into()));
        }
        let hd = self.horizon(h)?;
        let masks: Vec<ObsMaskSeries> = (0..runs)
            .map(|r| self.simulate(seed, h, p01, p11, r))
            .collect::<Result<_>>()?;
        let mut rows: Vec<QSweepRow> = partitions
            .par_iter()
            .map(|(q, art)| {
                art.representative().check_compatible(&hd.dataset)?;
                let scores = masks
                    .iter()
                    .map(|mask| {
                        let (start, end) = (hd.bounds.val_end, hd.bounds.n);
                        let patterns = expand_obs_mask(mask, &hd.dataset.rows(start, end))?;
                        let preds = (start..end)
                            .zip(&patterns)
                            .map(|(i, a)| art.predict(hd.dataset.x.row(i), a))
                            .collect::<Result<Vec<_>>>()?;
                        Ok(self.score(&preds, h)?.0)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let (mean, std) = mean_std(&scores);
                let max_relgap = match art {
                    Artifact::Learned(p) => p.max_relgap(),
                    Artifact::Single { .. } | Artifact::Fixed(_) => f64::NAN,
                };
                Ok(QSweepRow {
                    q: *q,
                    nrmse_mean: mean,
                    nrmse_std: std,
                    max_relgap,
                })
            })
            .collect::<Result<_>>()?;
        rows.sort_by_key(|r| r.q);
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QSweepRow {
    pub q: usize,
    pub nrmse_mean: f64,
    pub nrmse_std: f64,
    pub max_relgap: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub h: usize,
    pub p01: f64,
    pub p11: f64,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

impl EvalResult {
    fn cell(&self, method: Method, h: usize, p01: f64, p11: f64) -> impl Iterator<Item = &EvalRecord> {
        self.records
            .iter()
            .filter(move |r| r.method == method && r.h == h && r.p01 == p01 && r.p11 == p11)
    }

    pub fn mean_nrmse(&self, method: Method, h: usize, p01: f64, p11: f64) -> Option<f64> {
        let v: Vec<f64> = self.cell(method, h, p01, p11).map(|r| r.nrmse).collect();
        (!v.is_empty()).then(|| mean_std(&v).0)
    }

    /// Per-observation squared errors averaged over runs.
    pub fn mean_sq_errors(&self, method: Method, h: usize, p01: f64, p11: f64) -> Option<Vec<f64>> {
        let recs: Vec<&EvalRecord> = self.cell(method, h, p01, p11).collect();
        let first = recs.first()?;
        let mut acc = vec![0.0; first.sq_errors.len()];
        for r in &recs {
            for (a, e) in acc.iter_mut().zip(&r.sq_errors) {
                *a += e;
            }
        }
        let n = recs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Some(acc)
    }

    /// DM test of method `a` against `b` on run-averaged squared errors.
    pub fn dm_compare(&self, a: Method, b: Method, h: usize, p01: f64, p11: f64) -> Result<DmResult> {
        let missing = |m: Method| Error::Config(format!("no results for {m} at h={h}, p01={p01}, p11={p11}"));
        let la = self.mean_sq_errors(a, h, p01, p11).ok_or_else(|| missing(a))?;
        let lb = self.mean_sq_errors(b, h, p01, p11).ok_or_else(|| missing(b))?;
        dm_test(&la, &lb)
    }

    /// Mean and standard deviation per cell, in record order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: Vec<(Method, usize, f64, f64, Vec<f64>)> = Vec::new();
        for r in &self.records {
            match groups.last_mut() {
                Some(g) if g.0 == r.method && g.1 == r.h && g.2 == r.p01 && g.3 == r.p11 => g.4.push(r.nrmse),
                _ => groups.push((r.method, r.h, r.p01, r.p11, vec![r.nrmse])),
            }
        }
        groups
            .into_iter()
            .map(|(method, h, p01, p11, v)| {
                let (mean, std) = mean_std(&v);
                SummaryRow {
                    method,
                    h,
                    p01,
                    p11,
                    runs: v.len(),
                    mean,
                    std,
                }
            })
            .collect()
    }
}

fn write_lines(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for l in lines {
        writeln!(w, "{l}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes `grid.csv`, `summary.csv` and `qsweep.csv` into `out_dir`.
pub fn emit_report(result: &EvalResult, qsweep: &[QSweepRow], out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    if result.records.is_empty() {
        return Err(Error::Size("no evaluation records to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_lines(
        &dir.join("grid.csv"),
        "method,h,p01,p11,run,nrmse",
        result
            .records
            .iter()
            .map(|r| format!("{},{},{},{},{},{}", r.method, r.h, r.p01, r.p11, r.run, r.nrmse)),
    )?;
    write_lines(
        &dir.join("summary.csv"),
        "method,h,p01,p11,runs,mean_nrmse,std_nrmse",
        result
            .summary()
            .into_iter()
            .map(|s| format!("{},{},{},{},{},{},{}", s.method, s.h, s.p01, s.p11, s.runs, s.mean, s.std)),
    )?;
    write_lines(
        &dir.join("qsweep.csv"),
        "q,nrmse_mean,nrmse_std,max_relgap",
        qsweep
            .iter()
            .map(|r| format!("{},{},{},{}", r.q, r.nrmse_mean, r.nrmse_std, r.max_relgap)),
    )
}
