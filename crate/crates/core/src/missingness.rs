//! Missing-feature patterns, Markov missingness simulation and imputation
//! baselines.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Binary vector over all `p` features, `1` meaning the feature is missing.
/// Only maskable features may carry a `1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MissingPattern {
    pub bits: Vec<u8>,
}

impl MissingPattern {
    pub fn zeros(p: usize) -> Self {
        Self { bits: vec![0; p] }
    }

    pub fn from_indices(p: usize, missing: &[usize]) -> Self {
        let mut a = Self::zeros(p);
        for &j in missing {
            a.bits[j] = 1;
        }
        a
    }

    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|b| **b > 1) {
            return Err(Error::Domain(format!("pattern bit {b} is not binary")));
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn is_missing(&self, j: usize) -> bool {
        self.bits[j] != 0
    }

    pub fn set(&mut self, j: usize, missing: bool) {
        self.bits[j] = u8::from(missing);
    }

    pub fn with(&self, j: usize) -> Self {
        let mut a = self.clone();
        a.bits[j] = 1;
        a
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b != 0).count()
    }

    pub fn is_zero(&self) -> bool {
        self.bits.iter().all(|b| *b == 0)
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&j| self.bits[j] != 0).collect()
    }

    /// Checks length and that every set bit lies in `maskable`.
    pub fn validate(&self, p: usize, maskable: &[usize]) -> Result<()> {
        if self.bits.len() != p {
            return Err(Error::Domain(format!(
                "pattern length {} does not match {p} features",
                self.bits.len()
            )));
        }
        for j in self.missing_indices() {
            if maskable.binary_search(&j).is_err() {
                return Err(Error::Domain(format!(
                    "feature {j} marked missing but is not maskable"
                )));
            }
        }
        Ok(())
    }

    /// Pattern restricted to `maskable`, as `f64` 0/1 entries in that order.
    pub(crate) fn restricted(&self, maskable: &[usize]) -> Vec<f64> {
        maskable
            .iter()
            .map(|&j| if self.is_missing(j) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Compact `0101...` rendering over all features.
    pub fn to_bitstring(&self) -> String {
        self.bits.iter().map(|b| if *b != 0 { '1' } else { '0' }).collect()
    }
}

/// Zeroes out missing maskable features. Non-maskable features pass through.
pub fn apply_mask(x: &[f64], alpha: &MissingPattern, maskable: &[usize]) -> Result<Vec<f64>> {
    alpha.validate(x.len(), maskable)?;
    Ok(mask_unchecked(x, alpha))
}

#[inline]
pub(crate) fn mask_unchecked(x: &[f64], alpha: &MissingPattern) -> Vec<f64> {
    x.iter()
        .zip(&alpha.bits)
        .map(|(v, b)| if *b != 0 { 0.0 } else { *v })
        .collect()
}

// ---------------------------------------------------------------------------
// Markov simulation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingnessConfig {
    /// Probability of becoming missing after an available period.
    pub p01: f64,
    /// Probability of staying missing after a missing period.
    pub p11: f64,
    pub seed: u64,
}

impl MissingnessConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p01", self.p01), ("p11", self.p11)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Long-run missing fraction of the chain.
    pub fn stationary_missing(&self) -> f64 {
        let denom = self.p01 + 1.0 - self.p11;
        if denom == 0.0 {
            0.0
        } else {
            self.p01 / denom
        }
    }
}

/// Plant-level availability over time, `1` = measurement missing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsMaskSeries {
    pub periods: usize,
    pub plants: usize,
    /// Row-major `periods x plants`.
    pub mask: Vec<u8>,
}

impl ObsMaskSeries {
    pub fn zeros(periods: usize, plants: usize) -> Self {
        Self {
            periods,
            plants,
            mask: vec![0; periods * plants],
        }
    }

    #[inline]
    pub fn get(&self, t: usize, s: usize) -> bool {
        self.mask[t * self.plants + s] != 0
    }

    pub fn set(&mut self, t: usize, s: usize, missing: bool) {
        self.mask[t * self.plants + s] = u8::from(missing);
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|b| **b != 0).count() as f64 / self.mask.len() as f64
    }

    /// Writes `period,plant_0..` with 0/1 cells. `timestamps` defaults to row indices.
    pub fn write_csv(&self, path: impl AsRef<Path>, timestamps: Option<&[i64]>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let mut header = String::from("period");
        for s in 0..self.plants {
            header.push_str(&format!(",plant_{s}"));
        }
        writeln!(w, "{header}").map_err(io)?;
        for t in 0..self.periods {
            let period = timestamps.map_or(t as i64, |ts| ts[t]);
            let mut line = period.to_string();
            for s in 0..self.plants {
                line.push_str(if self.get(t, s) { ",1" } else { ",0" });
            }
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(file);
        let plants = rdr.headers()?.len().saturating_sub(1);
        let mut mask = Vec::new();
        let mut periods = 0;
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != plants + 1 {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {} fields", plants + 1),
                });
            }
            for cell in rec.iter().skip(1) {
                mask.push(match cell.trim() {
                    "0" => 0,
                    "1" => 1,
                    other => {
                        return Err(Error::Parse {
                            line,
                            msg: format!("mask cell `{other}` is not 0/1"),
                        })
                    }
                });
            }
            periods += 1;
        }
        Ok(Self {
            periods,
            plants,
            mask,
        })
    }
}

/// Independent two-state chain per plant, each starting available at period 0.
/// Plant `s` draws from stream `s` of a ChaCha generator keyed by the seed.
pub fn simulate_markov(
    cfg: &MissingnessConfig,
    periods: usize,
    plants: usize,
) -> Result<ObsMaskSeries> {
    cfg.validate()?;
    let mut out = ObsMaskSeries::zeros(periods, plants);
    for s in 0..plants {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(s as u64);
        let mut missing = false;
        for t in 1..periods {
            let u: f64 = rng.random();
            missing = if missing { u < cfg.p11 } else { u < cfg.p01 };
            out.set(t, s, missing);
        }
    }
    Ok(out)
}

/// Feature-level pattern per dataset row: feature (plant `s`, lag `k`) of the
/// row observed at period `t` is missing iff `mask[t - k, s]` is set.
pub fn expand_obs_mask(mask: &ObsMaskSeries, ds: &Dataset) -> Result<Vec<MissingPattern>> {
    let p = ds.n_features();
    let mut out = Vec::with_capacity(ds.n_rows());
    for (i, &t) in ds.obs_periods.iter().enumerate() {
        let mut alpha = MissingPattern::zeros(p);
        for &j in &ds.maskable {
            let d = &ds.descriptors[j];
            let (s, k) = (d.plant.unwrap_or(0), d.lag.unwrap_or(0));
            if t < k || t - k >= mask.periods || s >= mask.plants {
                return Err(Error::Index(format!(
                    "row {i} needs mask entry (period {}, plant {s}) outside {}x{}",
                    t as i64 - k as i64,
                    mask.periods,
                    mask.plants
                )));
            }
            if mask.get(t - k, s) {
                alpha.bits[j] = 1;
            }
        }
        out.push(alpha);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Imputation
// ---------------------------------------------------------------------------

/// Value used for missing entries that have no earlier observation.
pub const PERSISTENCE_FALLBACK: f64 = 0.0;

/// Forward-fills each plant's missing entries with its last available value.
pub fn impute_persistence(values: &Matrix, mask: &ObsMaskSeries) -> Result<Matrix> {
    if values.rows != mask.periods || values.cols != mask.plants {
        return Err(Error::Size(format!(
            "mask {}x{} does not match series {}x{}",
            mask.periods, mask.plants, values.rows, values.cols
        )));
    }
    let mut out = values.clone();
    for s in 0..values.cols {
        let mut last = PERSISTENCE_FALLBACK;
        for t in 0..values.rows {
            if mask.get(t, s) {
                out.set(t, s, last);
            } else {
                last = values.get(t, s);
            }
        }
    }
    Ok(out)
}

/// Replaces missing coordinates with training-set column means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanImputer {
    pub means: Vec<f64>,
}

impl MeanImputer {
    pub fn fit(train: &Dataset) -> Self {
        Self {
            means: train.column_means(),
        }
    }

    pub fn impute(&self, x: &[f64], alpha: &MissingPattern) -> Vec<f64> {
        impute_mean(&self.means, x, alpha)
    }
}

pub fn impute_mean(means: &[f64], x: &[f64], alpha: &MissingPattern) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(j, v)| if alpha.is_missing(j) { means[j] } else { *v })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{build_supervised, RawSeries};

    #[test]
    fn mask_zeroes_missing_features() {
        let a = MissingPattern::from_bits(vec![0, 1, 0]).unwrap();
        assert_eq!(apply_mask(&[1.0, 2.0, 3.0], &a, &[0, 1, 2]).unwrap(), vec![1.0, 0.0, 3.0]);
        let z = MissingPattern::zeros(3);
        assert_eq!(apply_mask(&[1.0, 2.0, 3.0], &z, &[0, 1]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn mask_rejects_bit_outside_maskable() {
        let a = MissingPattern::from_bits(vec![0, 0, 1]).unwrap();
        assert!(matches!(apply_mask(&[1.0, 2.0, 3.0], &a, &[0, 1]), Err(Error::Domain(_))));
    }

    #[test]
    fn chain_never_leaves_available_when_p01_zero() {
        let cfg = MissingnessConfig { p01: 0.0, p11: 0.7, seed: 3 };
        let m = simulate_markov(&cfg, 500, 3).unwrap();
        assert!(m.mask.iter().all(|b| *b == 0));
    }

    #[test]
    fn forced_transitions() {
        let cfg = MissingnessConfig { p01: 1.0, p11: 1.0, seed: 3 };
        let m = simulate_markov(&cfg, 20, 2).unwrap();
        for s in 0..2 {
            assert!(!m.get(0, s));
            assert!((1..20).all(|t| m.get(t, s)));
        }
    }

    #[test]
    fn invalid_probability() {
        let cfg = MissingnessConfig { p01: 1.5, p11: 0.0, seed: 0 };
        assert!(matches!(simulate_markov(&cfg, 5, 1), Err(Error::Config(_))));
    }

    fn ramp_raw(t_len: usize, plants: usize) -> RawSeries {
        let data = (0..t_len * plants).map(|i| (i % 10) as f64 / 10.0).collect();
        RawSeries::new(
            (0..t_len as i64).collect(),
            Matrix::from_vec(t_len, plants, data),
            vec![1.0; plants],
            Some(vec![0.5; t_len]),
        )
        .unwrap()
    }

    #[test]
    fn single_missing_measurement_reaches_three_rows() {
        let raw = ramp_raw(12, 2);
        let ds = build_supervised(&raw, 0, 2, 1).unwrap();
        let (t_star, s_star) = (5, 1);
        let mut mask = ObsMaskSeries::zeros(12, 2);
        mask.set(t_star, s_star, true);
        let pats = expand_obs_mask(&mask, &ds).unwrap();
        // Hand enumeration: rows at periods 5, 6, 7 see the gap at lags 0, 1, 2.
        let mut hits = Vec::new();
        for (i, a) in pats.iter().enumerate() {
            for j in a.missing_indices() {
                hits.push((ds.obs_periods[i], j));
            }
        }
        let col = |lag: usize| s_star * 3 + lag;
        assert_eq!(hits, vec![(5, col(0)), (6, col(1)), (7, col(2))]);
    }

    #[test]
    fn expand_all_ones_and_zeros() {
        let raw = ramp_raw(10, 2);
        let ds = build_supervised(&raw, 0, 1, 2).unwrap();
        let zero = expand_obs_mask(&ObsMaskSeries::zeros(10, 2), &ds).unwrap();
        assert!(zero.iter().all(MissingPattern::is_zero));
        let mut ones = ObsMaskSeries::zeros(10, 2);
        ones.mask.fill(1);
        for a in expand_obs_mask(&ones, &ds).unwrap() {
            assert_eq!(a.popcount(), ds.maskable.len());
            a.validate(ds.n_features(), &ds.maskable).unwrap();
        }
    }

    #[test]
    fn expand_detects_shape_mismatch() {
        let raw = ramp_raw(10, 2);
        let ds = build_supervised(&raw, 0, 1, 1).unwrap();
        assert!(matches!(
            expand_obs_mask(&ObsMaskSeries::zeros(5, 2), &ds),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn persistence_forward_fill() {
        let vals = Matrix::from_vec(4, 1, vec![0.5, 0.9, 0.8, 0.7]);
        let mut mask = ObsMaskSeries::zeros(4, 1);
        mask.set(1, 0, true);
        mask.set(2, 0, true);
        let out = impute_persistence(&vals, &mask).unwrap();
        assert_eq!(out.data, vec![0.5, 0.5, 0.5, 0.7]);
        assert_eq!(impute_persistence(&out, &mask).unwrap(), out);
        assert_eq!(impute_persistence(&vals, &ObsMaskSeries::zeros(4, 1)).unwrap(), vals);
    }

    #[test]
    fn persistence_leading_gap_uses_fallback() {
        let vals = Matrix::from_vec(2, 1, vec![0.3, 0.4]);
        let mut mask = ObsMaskSeries::zeros(2, 1);
        mask.set(0, 0, true);
        assert_eq!(impute_persistence(&vals, &mask).unwrap().data, vec![0.0, 0.4]);
    }

    #[test]
    fn mean_imputation() {
        let means = [0.3, 0.6, 1.0];
        let x = [0.9, 0.1, 1.0];
        assert_eq!(impute_mean(&means, &x, &MissingPattern::zeros(3)), x.to_vec());
        let a = MissingPattern::from_indices(3, &[0]);
        assert_eq!(impute_mean(&means, &x, &a), vec![0.3, 0.1, 1.0]);
        let all = MissingPattern::from_indices(3, &[0, 1]);
        assert_eq!(impute_mean(&means, &x, &all)[..2], means[..2]);
    }

    #[test]
    fn mask_csv_round_trip() {
        let cfg = MissingnessConfig { p01: 0.3, p11: 0.6, seed: 9 };
        let m = simulate_markov(&cfg, 40, 3).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        m.write_csv(f.path(), None).unwrap();
        assert_eq!(ObsMaskSeries::read_csv(f.path()).unwrap(), m);
    }
}
