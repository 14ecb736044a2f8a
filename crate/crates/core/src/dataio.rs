//! Multi-plant time series ingestion, synthetic generation and supervised
//! matrix construction.
//!
//! Feature columns are laid out plant-major, lag-minor (lag 0 first), then the
//! optional weather column, then the constant bias column.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Normalized production of several plants on a regular period grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    pub timestamps: Vec<i64>,
    /// `T_periods x S_plants`, entries in `[0, 1]`.
    pub values: Matrix,
    /// Nominal capacity per plant in MW.
    pub capacities: Vec<f64>,
    /// Normalized production forecast, one entry per period.
    pub weather: Option<Vec<f64>>,
}

impl RawSeries {
    pub fn new(
        timestamps: Vec<i64>,
        values: Matrix,
        capacities: Vec<f64>,
        weather: Option<Vec<f64>>,
    ) -> Result<Self> {
        let raw = Self {
            timestamps,
            values,
            capacities,
            weather,
        };
        raw.validate()?;
        Ok(raw)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.timestamps.len();
        if self.values.rows != t {
            return Err(Error::Size(format!(
                "values has {} rows but there are {} timestamps",
                self.values.rows, t
            )));
        }
        if self.capacities.len() != self.values.cols {
            return Err(Error::Size(format!(
                "{} capacities for {} plants",
                self.capacities.len(),
                self.values.cols
            )));
        }
        if let Some(c) = self.capacities.iter().find(|c| !(**c > 0.0)) {
            return Err(Error::Domain(format!("capacity {c} is not positive")));
        }
        if t >= 2 {
            let step = self.timestamps[1] - self.timestamps[0];
            if step <= 0 {
                return Err(Error::Order(format!(
                    "periods not increasing at row 1 ({} after {})",
                    self.timestamps[1], self.timestamps[0]
                )));
            }
            for i in 1..t {
                if self.timestamps[i] - self.timestamps[i - 1] != step {
                    return Err(Error::Order(format!(
                        "period {} at row {} breaks the constant step {}",
                        self.timestamps[i], i, step
                    )));
                }
            }
        }
        for r in 0..t {
            for (s, v) in self.values.row(r).iter().enumerate() {
                if !(0.0..=1.0).contains(v) {
                    return Err(Error::Domain(format!(
                        "value {v} for plant {s} at row {r} outside [0, 1]"
                    )));
                }
            }
        }
        if let Some(w) = &self.weather {
            if w.len() != t {
                return Err(Error::Size(format!(
                    "weather has {} entries for {} periods",
                    w.len(),
                    t
                )));
            }
            if let Some((r, v)) = w.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Domain(format!(
                    "weather value {v} at row {r} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn n_periods(&self) -> usize {
        self.values.rows
    }

    pub fn n_plants(&self) -> usize {
        self.values.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Measurement,
    Weather,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub kind: FeatureKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub plant: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lag: Option<usize>,
}

impl FeatureDescriptor {
    pub fn measurement(plant: usize, lag: usize) -> Self {
        Self {
            kind: FeatureKind::Measurement,
            plant: Some(plant),
            lag: Some(lag),
        }
    }

    pub fn weather() -> Self {
        Self {
            kind: FeatureKind::Weather,
            plant: None,
            lag: None,
        }
    }

    pub fn bias() -> Self {
        Self {
            kind: FeatureKind::Bias,
            plant: None,
            lag: None,
        }
    }

    pub fn is_maskable(&self) -> bool {
        self.kind == FeatureKind::Measurement
    }

    /// Short label, e.g. `p2_t-1`, `weather`, `bias`.
    pub fn label(&self) -> String {
        match (self.kind, self.plant, self.lag) {
            (FeatureKind::Measurement, Some(p), Some(0)) => format!("p{p}_t"),
            (FeatureKind::Measurement, Some(p), Some(k)) => format!("p{p}_t-{k}"),
            (FeatureKind::Weather, ..) => "weather".to_string(),
            _ => "bias".to_string(),
        }
    }
}

/// Supervised learning matrix built from a [`RawSeries`].
///
/// `obs_periods[i]` is the row position `t` in the source series that row `i`
/// was built from; its target is the target plant's value at `t + horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    #[serde(rename = "X")]
    pub x: Matrix,
    pub y: Vec<f64>,
    pub descriptors: Vec<FeatureDescriptor>,
    /// Indices of maskable features, ascending.
    #[serde(rename = "P")]
    pub maskable: Vec<usize>,
    pub horizon: usize,
    pub max_lag: usize,
    pub obs_periods: Vec<usize>,
    pub target_plant: usize,
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.x.rows
    }

    pub fn n_features(&self) -> usize {
        self.x.cols
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows == 0
    }

    pub fn bias_index(&self) -> Option<usize> {
        self.descriptors
            .iter()
            .position(|d| d.kind == FeatureKind::Bias)
    }

    /// Rows `start..end`, preserving order and metadata.
    pub fn rows(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            x: self.x.slice_rows(start, end),
            y: self.y[start..end].to_vec(),
            descriptors: self.descriptors.clone(),
            maskable: self.maskable.clone(),
            horizon: self.horizon,
            max_lag: self.max_lag,
            obs_periods: self.obs_periods[start..end].to_vec(),
            target_plant: self.target_plant,
        }
    }

    /// Copy of the dataset whose measurement columns are re-read from
    /// `values` (same shape as the source series). Targets are kept.
    pub fn with_measurements_from(&self, values: &Matrix) -> Result<Dataset> {
        let mut out = self.clone();
        for (i, &t) in self.obs_periods.iter().enumerate() {
            for (j, d) in self.descriptors.iter().enumerate() {
                if let (FeatureKind::Measurement, Some(s), Some(k)) = (d.kind, d.plant, d.lag) {
                    if t < k || t - k >= values.rows || s >= values.cols {
                        return Err(Error::Index(format!(
                            "row {i} addresses period {t} lag {k} plant {s} outside the series"
                        )));
                    }
                    out.x.set(i, j, values.get(t - k, s));
                }
            }
        }
        Ok(out)
    }

    /// Column means over all rows.
    pub fn column_means(&self) -> Vec<f64> {
        let n = self.n_rows().max(1) as f64;
        let mut means = vec![0.0; self.n_features()];
        for r in 0..self.n_rows() {
            for (m, v) in means.iter_mut().zip(self.x.row(r)) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        means
    }
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Reads `period,plant_0..plant_{S-1}[,weather]`. Values outside `[0, 1]` are
/// rejected, not clipped. Capacities are not part of the file and default to 1.
pub fn load_csv(path: impl AsRef<Path>) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.first() != Some(&"period") {
        return Err(Error::Parse {
            line: 1,
            msg: "first column must be `period`".into(),
        });
    }
    let has_weather = names.last() == Some(&"weather");
    let n_plants = names.len() - 1 - usize::from(has_weather);
    if n_plants == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: "no plant columns".into(),
        });
    }
    for (s, name) in names[1..=n_plants].iter().enumerate() {
        if *name != format!("plant_{s}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column `plant_{s}`, found `{name}`"),
            });
        }
    }

    let mut timestamps = Vec::new();
    let mut data = Vec::new();
    let mut weather = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != names.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", names.len(), rec.len()),
            });
        }
        let period: i64 = rec[0].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad period `{}`", &rec[0]),
        })?;
        let row = timestamps.len();
        let parse_cell = |idx: usize| -> Result<f64> {
            let v: f64 = rec[idx].parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad number `{}` in column `{}`", &rec[idx], names[idx]),
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!(
                    "value {v} in column `{}` at row {row} (line {line}) outside [0, 1]",
                    names[idx]
                )));
            }
            Ok(v)
        };
        for idx in 1..=n_plants {
            data.push(parse_cell(idx)?);
        }
        if has_weather {
            weather.push(parse_cell(n_plants + 1)?);
        }
        if let Some(&prev) = timestamps.last() {
            if period <= prev {
                return Err(Error::Order(format!(
                    "period {period} at line {line} does not follow {prev}"
                )));
            }
        }
        timestamps.push(period);
    }

    let rows = timestamps.len();
    RawSeries::new(
        timestamps,
        Matrix::from_vec(rows, n_plants, data),
        vec![1.0; n_plants],
        has_weather.then_some(weather),
    )
}

pub fn write_csv(raw: &RawSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let mut header = String::from("period");
    for s in 0..raw.n_plants() {
        header.push_str(&format!(",plant_{s}"));
    }
    if raw.weather.is_some() {
        header.push_str(",weather");
    }
    writeln!(w, "{header}").map_err(io)?;
    for t in 0..raw.n_periods() {
        let mut line = raw.timestamps[t].to_string();
        for v in raw.values.row(t) {
            line.push_str(&format!(",{v}"));
        }
        if let Some(wx) = &raw.weather {
            line.push_str(&format!(",{}", wx[t]));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Configuration of the synthetic multi-plant generator.
///
/// Each plant follows a latent AR(1) recursion
/// `z[t] = a z[t-1] + noise_std * (sqrt(rho) c[t] + sqrt(1 - rho) u_s[t])`
/// with a shared shock `c` and idiosyncratic shocks `u_s`, started from its
/// stationary law and squashed to `(0, 1)` by the logistic map. The weather
/// column is a noisy moving average of the weather plant's latent path,
/// centered `weather_lead` periods ahead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_plants: usize,
    pub n_periods: usize,
    pub ar_coefficient: f64,
    pub cross_plant_correlation: f64,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub weather: bool,
    #[serde(default)]
    pub weather_plant: usize,
    #[serde(default = "default_weather_lead")]
    pub weather_lead: usize,
    #[serde(default = "default_weather_window")]
    pub weather_window: usize,
    #[serde(default = "default_weather_noise")]
    pub weather_noise_std: f64,
    #[serde(default = "default_capacity")]
    pub capacity_mw: f64,
}

fn default_true() -> bool {
    true
}
fn default_weather_lead() -> usize {
    1
}
fn default_weather_window() -> usize {
    4
}
fn default_weather_noise() -> f64 {
    0.15
}
fn default_capacity() -> f64 {
    100.0
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_plants: 4,
            n_periods: 8000,
            ar_coefficient: 0.98,
            cross_plant_correlation: 0.8,
            noise_std: 0.1,
            seed: 0,
            weather: true,
            weather_plant: 0,
            weather_lead: default_weather_lead(),
            weather_window: default_weather_window(),
            weather_noise_std: default_weather_noise(),
            capacity_mw: default_capacity(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_plants == 0 {
            return bad("n_plants must be at least 1".into());
        }
        if self.n_periods < 2 {
            return bad("n_periods must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.ar_coefficient) {
            return bad(format!("ar_coefficient {} outside [0, 1)", self.ar_coefficient));
        }
        if !(0.0..1.0).contains(&self.cross_plant_correlation) {
            return bad(format!(
                "cross_plant_correlation {} outside [0, 1)",
                self.cross_plant_correlation
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and >= 0", self.noise_std));
        }
        if self.weather_plant >= self.n_plants {
            return bad(format!("weather_plant {} out of range", self.weather_plant));
        }
        if self.weather_window == 0 {
            return bad("weather_window must be at least 1".into());
        }
        if !(self.weather_noise_std >= 0.0 && self.weather_noise_std.is_finite()) {
            return bad("weather_noise_std must be finite and >= 0".into());
        }
        if !(self.capacity_mw > 0.0) {
            return bad("capacity_mw must be positive".into());
        }
        Ok(())
    }
}

#[inline]
fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Latent AR(1) paths, `n_periods x n_plants`, row-major.
fn latent_paths(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (t_len, s_len) = (cfg.n_periods, cfg.n_plants);
    let a = cfg.ar_coefficient;
    let common = cfg.cross_plant_correlation.sqrt();
    let own = (1.0 - cfg.cross_plant_correlation).sqrt();
    let stationary = 1.0 / (1.0 - a * a).sqrt();
    let mut z = vec![0.0; t_len * s_len];
    let mut shocks = vec![0.0; s_len];
    for t in 0..t_len {
        let c: f64 = rng.sample(StandardNormal);
        for e in shocks.iter_mut() {
            let u: f64 = rng.sample(StandardNormal);
            *e = cfg.noise_std * (common * c + own * u);
        }
        for s in 0..s_len {
            z[t * s_len + s] = if t == 0 {
                shocks[s] * stationary
            } else {
                a * z[(t - 1) * s_len + s] + shocks[s]
            };
        }
    }
    z
}

pub fn gen_synthetic(cfg: &SynthConfig) -> Result<RawSeries> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let z = latent_paths(cfg, &mut rng);
    let (t_len, s_len) = (cfg.n_periods, cfg.n_plants);
    let values = Matrix::from_vec(t_len, s_len, z.iter().map(|v| logistic(*v)).collect());

    let weather = cfg.weather.then(|| {
        let w = cfg.weather_window;
        (0..t_len)
            .map(|t| {
                let center = (t + cfg.weather_lead).min(t_len - 1);
                let lo = (center + 1).saturating_sub(w);
                let sum: f64 = (lo..=center).map(|k| z[k * s_len + cfg.weather_plant]).sum();
                let err: f64 = rng.sample(StandardNormal);
                logistic(sum / (center - lo + 1) as f64 + cfg.weather_noise_std * err)
            })
            .collect()
    });

    RawSeries::new(
        (0..t_len as i64).collect(),
        values,
        vec![cfg.capacity_mw; s_len],
        weather,
    )
}

// ---------------------------------------------------------------------------
// Supervised matrices and splits
// ---------------------------------------------------------------------------

pub fn build_supervised(
    raw: &RawSeries,
    target_plant: usize,
    max_lag: usize,
    horizon: usize,
) -> Result<Dataset> {
    if horizon < 1 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    if target_plant >= raw.n_plants() {
        return Err(Error::Config(format!(
            "target plant {target_plant} but only {} plants",
            raw.n_plants()
        )));
    }
    let t_len = raw.n_periods();
    if t_len <= max_lag + horizon {
        return Err(Error::Size(format!(
            "series of {t_len} periods too short for max lag {max_lag} and horizon {horizon}"
        )));
    }

    let mut descriptors = Vec::new();
    for s in 0..raw.n_plants() {
        for k in 0..=max_lag {
            descriptors.push(FeatureDescriptor::measurement(s, k));
        }
    }
    if raw.weather.is_some() {
        descriptors.push(FeatureDescriptor::weather());
    }
    descriptors.push(FeatureDescriptor::bias());
    let p = descriptors.len();
    let maskable: Vec<usize> = (0..p).filter(|&j| descriptors[j].is_maskable()).collect();

    let n = t_len - max_lag - horizon;
    let mut x = Matrix::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    let mut obs_periods = Vec::with_capacity(n);
    for (i, t) in (max_lag..t_len - horizon).enumerate() {
        let row = x.row_mut(i);
        let mut j = 0;
        for s in 0..raw.n_plants() {
            for k in 0..=max_lag {
                row[j] = raw.values.get(t - k, s);
                j += 1;
            }
        }
        if let Some(w) = &raw.weather {
            row[j] = w[t];
            j += 1;
        }
        row[j] = 1.0;
        y.push(raw.values.get(t + horizon, target_plant));
        obs_periods.push(t);
    }

    Ok(Dataset {
        x,
        y,
        descriptors,
        maskable,
        horizon,
        max_lag,
        obs_periods,
        target_plant,
    })
}

/// Row ranges of a sequential train/validation/test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub n: usize,
}

/// Floor-based split arithmetic: the training segment is the first
/// `floor(n * train_frac)` rows and validation is its last
/// `floor(train_len * val_frac)` rows.
pub fn split_bounds(n: usize, train_frac: f64, val_frac_of_train: f64) -> Result<SplitBounds> {
    for (name, f) in [("train_frac", train_frac), ("val_frac", val_frac_of_train)] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("{name} {f} outside (0, 1)")));
        }
    }
    let train_total = (n as f64 * train_frac).floor() as usize;
    let val = (train_total as f64 * val_frac_of_train).floor() as usize;
    let fit = train_total - val;
    let test = n - train_total;
    if fit == 0 || val == 0 || test == 0 {
        return Err(Error::Size(format!(
            "split of {n} rows gives empty segment (train {fit}, val {val}, test {test})"
        )));
    }
    Ok(SplitBounds {
        train_end: fit,
        val_end: train_total,
        n,
    })
}

pub fn split_sequential(
    ds: &Dataset,
    train_frac: f64,
    val_frac_of_train: f64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let b = split_bounds(ds.n_rows(), train_frac, val_frac_of_train)?;
    Ok((
        ds.rows(0, b.train_end),
        ds.rows(b.train_end, b.val_end),
        ds.rows(b.val_end, b.n),
    ))
}
