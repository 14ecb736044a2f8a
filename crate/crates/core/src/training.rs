//! Mini-batch Adam training with patience-based early stopping.
//!
//! One iteration is one pass over contiguous mini-batches of the training
//! split followed by one validation evaluation. The best validation point
//! seen so far (including the starting parameters) is returned.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::missingness::MissingPattern;
use crate::models::{loss_and_grad, mse, Batch, ModelParams, ModelSpec};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Maximum number of iterations (epochs).
    pub max_iters: usize,
    /// Consecutive non-improving validation evaluations before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Shuffle mini-batch order each epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_iters: 1000,
            patience: 20,
            batch_size: 512,
            weight_decay: 1e-5,
            seed: 0,
            shuffle: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if self.max_iters == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "max_iters, patience and batch_size must be at least 1".into(),
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let shapes: Vec<Vec<f64>> = params.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        Self {
            first: shapes.clone(),
            second: shapes,
            step: 0,
        }
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    let g_blocks = grads.blocks();
    let p_blocks = params.blocks_mut();
    if g_blocks.len() != p_blocks.len()
        || state.first.len() != p_blocks.len()
        || p_blocks
            .iter()
            .zip(&g_blocks)
            .zip(&state.first)
            .any(|((p, g), m)| p.len() != g.len() || p.len() != m.len())
    {
        return Err(Error::Domain("gradient or optimizer state shape mismatch".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in p_blocks
        .into_iter()
        .zip(g_blocks)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Training and validation splits.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
}

impl<'a> TrainData<'a> {
    pub fn new(train: &'a Dataset, val: &'a Dataset) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Size(format!(
                "train ({}) and validation ({}) splits must be non-empty",
                train.n_rows(),
                val.n_rows()
            )));
        }
        if train.n_features() != val.n_features() || train.maskable != val.maskable {
            return Err(Error::Size("train and validation feature layouts differ".into()));
        }
        Ok(Self { train, val })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the evaluation of the starting parameters.
    pub iteration: usize,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub improved: bool,
    /// Missing features of the pattern trained on this iteration.
    pub train_missing: Vec<usize>,
    /// Missing features of the pattern the validation loss was taken at.
    pub val_missing: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
    /// Iteration of the returned parameters.
    pub best_iteration: usize,
}

impl TrainTrace {
    /// Number of gradient iterations run (excludes the starting evaluation).
    pub fn iterations(&self) -> usize {
        self.records.iter().filter(|r| r.iteration > 0).count()
    }

    pub fn last_iteration(&self) -> usize {
        self.records.last().map_or(0, |r| r.iteration)
    }

    pub fn min_val_loss(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min)
    }

    /// `iteration,train_loss,val_loss`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "iteration,train_loss,val_loss").map_err(io)?;
        for r in &self.records {
            let tl = r.train_loss.map_or(String::new(), |v| v.to_string());
            writeln!(w, "{},{},{}", r.iteration, tl, r.val_loss).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Best validation loss (`L-hat` / `L-adv`).
    pub loss: f64,
    pub trace: TrainTrace,
}

struct MiniBatches {
    batches: Vec<(Matrix, Vec<f64>)>,
}

impl MiniBatches {
    fn contiguous(ds: &Dataset, size: usize, order: Option<&[usize]>) -> Self {
        let n = ds.n_rows();
        let mut batches = Vec::with_capacity(n.div_ceil(size));
        let mut start = 0;
        while start < n {
            let end = (start + size).min(n);
            let batch = match order {
                None => (ds.x.slice_rows(start, end), ds.y[start..end].to_vec()),
                Some(idx) => {
                    let rows = &idx[start..end];
                    let mut x = Matrix::zeros(rows.len(), ds.n_features());
                    for (k, &i) in rows.iter().enumerate() {
                        x.row_mut(k).copy_from_slice(ds.x.row(i));
                    }
                    (x, rows.iter().map(|&i| ds.y[i]).collect())
                }
            };
            batches.push(batch);
            start = end;
        }
        Self { batches }
    }
}

/// Shared iteration loop. `train_pattern` picks the pattern to train on for
/// the current parameters; `val_eval` returns the validation loss and the
/// pattern it was measured at.
pub(crate) fn fit_loop<T, V>(
    data: TrainData<'_>,
    cfg: &TrainConfig,
    start: ModelParams,
    mut train_pattern: T,
    mut val_eval: V,
) -> Result<TrainOutcome>
where
    T: FnMut(&ModelParams) -> Result<MissingPattern>,
    V: FnMut(&ModelParams) -> Result<(f64, MissingPattern)>,
{
    cfg.validate()?;
    start.check_compatible(data.train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let fixed_batches = (!cfg.shuffle).then(|| MiniBatches::contiguous(data.train, cfg.batch_size, None));
    let mut order: Vec<usize> = (0..data.train.n_rows()).collect();

    let (val0, val_alpha0) = val_eval(&start)?;
    let mut trace = TrainTrace {
        records: vec![EpochRecord {
            iteration: 0,
            train_loss: None,
            val_loss: val0,
            improved: val0.is_finite(),
            train_missing: Vec::new(),
            val_missing: val_alpha0.missing_indices(),
        }],
        best_iteration: 0,
    };
    let mut best = start.clone();
    let mut best_loss = if val0.is_finite() { val0 } else { f64::INFINITY };
    let mut params = start;
    let mut state = AdamState::new(&params);
    let mut stale = 0usize;

    for k in 1..=cfg.max_iters {
        if stale >= cfg.patience {
            break;
        }
        let alpha = train_pattern(&params)?;
        let shuffled;
        let batches = match &fixed_batches {
            Some(b) => b,
            None => {
                order.shuffle(&mut rng);
                shuffled = MiniBatches::contiguous(data.train, cfg.batch_size, Some(&order));
                &shuffled
            }
        };
        let mut total = 0.0;
        for (x, y) in &batches.batches {
            let (loss, grads) = loss_and_grad(&params, &Batch::shared(x, y, &alpha), cfg.weight_decay)?;
            adam_step(&mut params, &grads, &mut state, cfg.learning_rate)?;
            total += loss * x.rows as f64;
        }
        let train_loss = total / data.train.n_rows() as f64;

        let (val_loss, val_alpha) = val_eval(&params)?;
        let improved = val_loss < best_loss;
        if improved {
            best = params.clone();
            best_loss = val_loss;
            trace.best_iteration = k;
            stale = 0;
        } else {
            stale += 1;
        }
        trace.records.push(EpochRecord {
            iteration: k,
            train_loss: Some(train_loss),
            val_loss,
            improved,
            train_missing: alpha.missing_indices(),
            val_missing: val_alpha.missing_indices(),
        });
    }

    Ok(TrainOutcome {
        params: best,
        loss: best_loss,
        trace,
    })
}

/// Trains at a fixed pattern `alpha` (applied to every row). Starts from
/// `warm_start` when given, otherwise from a seeded random initialization.
pub fn train_nominal(
    data: TrainData<'_>,
    alpha: &MissingPattern,
    cfg: &TrainConfig,
    spec: &ModelSpec,
    warm_start: Option<&ModelParams>,
) -> Result<TrainOutcome> {
    alpha.validate(data.train.n_features(), &data.train.maskable)?;
    let start = match warm_start {
        Some(p) => p.clone(),
        None => spec.init(data.train, cfg.seed)?,
    };
    fit_loop(
        data,
        cfg,
        start,
        |_| Ok(alpha.clone()),
        |p| Ok((mse(p, data.val, alpha)?, alpha.clone())),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::FeatureDescriptor;
    use crate::models::{Body, Family};

    fn scalar_params(w: f64) -> ModelParams {
        ModelParams {
            family: Family::Lr,
            adaptive: false,
            input_dim: 1,
            maskable: vec![0],
            bias_feature: None,
            body: Body::Linear { w: vec![w], correction: None },
        }
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = scalar_params(1.5);
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        assert_eq!(p.blocks()[0], &[1.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [1e-3, -0.5, 3.0, -20.0] {
            let mut p = scalar_params(0.0);
            let grads = scalar_params(g);
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &grads, &mut st, 1e-3).unwrap();
            let expected = -1e-3 * g.signum();
            assert!((p.blocks()[0][0] - expected).abs() < 1e-6, "g={g}");
        }
    }

    fn line_dataset(n: usize) -> Dataset {
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        Dataset {
            x: Matrix::from_vec(n, 1, xs.clone()),
            y: xs.iter().map(|x| 2.0 * x).collect(),
            descriptors: vec![FeatureDescriptor::measurement(0, 0)],
            maskable: vec![0],
            horizon: 1,
            max_lag: 0,
            obs_periods: (0..n).collect(),
            target_plant: 0,
        }
    }

    #[test]
    fn learns_noiseless_line() {
        let ds = line_dataset(200);
        let (tr, va) = (ds.rows(0, 150), ds.rows(150, 200));
        let cfg = TrainConfig {
            learning_rate: 0.05,
            max_iters: 1000,
            batch_size: 16,
            weight_decay: 0.0,
            ..Default::default()
        };
        let out = train_nominal(
            TrainData::new(&tr, &va).unwrap(),
            &MissingPattern::zeros(1),
            &cfg,
            &ModelSpec::lr(false),
            None,
        )
        .unwrap();
        assert!((out.params.blocks()[0][0] - 2.0).abs() < 1e-2);
        assert!(out.trace.iterations() <= 1000);
    }

    #[test]
    fn single_iteration_budget() {
        let ds = line_dataset(40);
        let (tr, va) = (ds.rows(0, 30), ds.rows(30, 40));
        let cfg = TrainConfig {
            max_iters: 1,
            patience: 1,
            ..Default::default()
        };
        let out = train_nominal(
            TrainData::new(&tr, &va).unwrap(),
            &MissingPattern::zeros(1),
            &cfg,
            &ModelSpec::lr(false),
            None,
        )
        .unwrap();
        assert_eq!(out.trace.iterations(), 1);
        assert!(out.loss <= out.trace.records[0].val_loss);
    }

    #[test]
    fn empty_split_rejected() {
        let ds = line_dataset(10);
        let empty = ds.rows(0, 0);
        assert!(matches!(TrainData::new(&ds, &empty), Err(Error::Size(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
