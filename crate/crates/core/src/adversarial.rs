//! Greedy worst-case missing-pattern search and the trainers built on it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::missingness::MissingPattern;
use crate::models::{mse, ModelParams, ModelSpec};
use crate::training::{fit_loop, train_nominal, TrainConfig, TrainData, TrainOutcome, TrainTrace};

/// Where the greedy search may move: features in `free` can be switched to
/// missing on top of `base`, as long as the total missing count stays within
/// `budget`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvSearchScope {
    pub free: Vec<usize>,
    pub budget: usize,
    pub base: MissingPattern,
}

impl AdvSearchScope {
    pub fn new(mut free: Vec<usize>, budget: usize, base: MissingPattern) -> Self {
        free.sort_unstable();
        free.dedup();
        Self { free, budget, base }
    }

    /// Whole maskable set, nothing fixed.
    pub fn full(p: usize, maskable: &[usize], budget: usize) -> Self {
        Self::new(maskable.to_vec(), budget, MissingPattern::zeros(p))
    }

    pub fn validate(&self, p: usize, maskable: &[usize]) -> Result<()> {
        self.base.validate(p, maskable)?;
        for &j in &self.free {
            if maskable.binary_search(&j).is_err() {
                return Err(Error::Domain(format!("free feature {j} is not maskable")));
            }
            if self.base.is_missing(j) {
                return Err(Error::Domain(format!(
                    "free feature {j} is already fixed missing in the base pattern"
                )));
            }
        }
        let fixed = self.base.popcount();
        if fixed > self.budget {
            return Err(Error::Domain(format!(
                "base pattern has {fixed} missing features, above the budget {}",
                self.budget
            )));
        }
        Ok(())
    }
}

/// One accepted step of the greedy search. Step 0 is the base pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvStep {
    pub step: usize,
    pub feature: Option<usize>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvSearchResult {
    pub alpha: MissingPattern,
    pub loss: f64,
    pub trace: Vec<AdvStep>,
}

impl AdvSearchResult {
    /// `step,feature,loss`; the feature column is empty for the base row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "step,feature,loss").map_err(io)?;
        for s in &self.trace {
            let f = s.feature.map_or(String::new(), |j| j.to_string());
            writeln!(w, "{},{},{}", s.step, f, s.loss).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Losses with each candidate additionally missing, in candidate order.
fn candidate_losses(
    ds: &Dataset,
    params: &ModelParams,
    current: &MissingPattern,
    candidates: &[usize],
) -> Result<Vec<f64>> {
    candidates
        .par_iter()
        .map(|&j| mse(params, ds, &current.with(j)))
        .collect()
}

/// First index of the largest value; NaN never wins.
fn argmax_lowest(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some(b) if *v <= values[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Greedy search for a high-loss pattern within `scope`.
///
/// Starting from the base pattern, repeatedly evaluates the loss with each
/// remaining free feature additionally missing and fixes the worst one, as
/// long as that does not lower the loss and the budget allows.
pub fn find_adversarial(
    ds: &Dataset,
    scope: &AdvSearchScope,
    params: &ModelParams,
) -> Result<AdvSearchResult> {
    if ds.is_empty() {
        return Err(Error::Size("adversarial search on an empty dataset".into()));
    }
    scope.validate(ds.n_features(), &ds.maskable)?;
    let mut alpha = scope.base.clone();
    let mut loss = mse(params, ds, &alpha)?;
    let mut trace = vec![AdvStep { step: 0, feature: None, loss }];
    let mut candidates = scope.free.clone();
    while alpha.popcount() < scope.budget && !candidates.is_empty() {
        let losses = candidate_losses(ds, params, &alpha, &candidates)?;
        let Some(k) = argmax_lowest(&losses) else { break };
        if losses[k] < loss {
            break;
        }
        let j = candidates.remove(k);
        alpha.set(j, true);
        loss = losses[k];
        trace.push(AdvStep {
            step: trace.len(),
            feature: Some(j),
            loss,
        });
    }
    Ok(AdvSearchResult { alpha, loss, trace })
}

/// The single free feature whose removal hurts most (first greedy step
/// without the acceptance test), with the resulting loss. `None` when there
/// is no free feature or the budget is already used up.
pub fn best_single_feature(
    ds: &Dataset,
    scope: &AdvSearchScope,
    params: &ModelParams,
) -> Result<Option<(usize, f64)>> {
    if ds.is_empty() {
        return Err(Error::Size("adversarial search on an empty dataset".into()));
    }
    scope.validate(ds.n_features(), &ds.maskable)?;
    if scope.free.is_empty() || scope.base.popcount() >= scope.budget {
        return Ok(None);
    }
    let losses = candidate_losses(ds, params, &scope.base, &scope.free)?;
    Ok(argmax_lowest(&losses).map(|k| (scope.free[k], losses[k])))
}

/// Adversarial training: a nominal warm start at the base pattern, then
/// iterations that each train one epoch at a freshly searched worst pattern.
pub fn train_adversarial(
    data: TrainData<'_>,
    scope: &AdvSearchScope,
    cfg: &TrainConfig,
    spec: &ModelSpec,
) -> Result<TrainOutcome> {
    let opt = train_nominal(data, &scope.base, cfg, spec, None)?;
    train_adversarial_from(data, scope, cfg, &opt.params)
}

/// Adversarial phase only, starting from already trained parameters
/// (normally the nominal solution at the scope's base pattern).
pub fn train_adversarial_from(
    data: TrainData<'_>,
    scope: &AdvSearchScope,
    cfg: &TrainConfig,
    start: &ModelParams,
) -> Result<TrainOutcome> {
    scope.validate(data.train.n_features(), &data.train.maskable)?;
    fit_loop(
        data,
        cfg,
        start.clone(),
        |p| Ok(find_adversarial(data.train, scope, p)?.alpha),
        |p| {
            let r = find_adversarial(data.val, scope, p)?;
            Ok((r.loss, r.alpha))
        },
    )
}

/// Uniformly random pattern with exactly `ell` of the `maskable` features
/// missing.
pub fn sample_fixed_adversarial<R: Rng + ?Sized>(
    ell: usize,
    p: usize,
    maskable: &[usize],
    rng: &mut R,
) -> Result<MissingPattern> {
    if ell > maskable.len() {
        return Err(Error::Domain(format!(
            "cannot mark {ell} of {} maskable features missing",
            maskable.len()
        )));
    }
    let mut alpha = MissingPattern::zeros(p);
    for k in index::sample(rng, maskable.len(), ell) {
        alpha.set(maskable[k], true);
    }
    Ok(alpha)
}

/// Trainer for the equality subset "exactly `ell` features missing": each
/// iteration trains on one uniformly sampled pattern and validates on
/// another. Starts from `start` (normally the nominal model).
pub fn train_fixed_sampled(
    data: TrainData<'_>,
    ell: usize,
    cfg: &TrainConfig,
    start: &ModelParams,
) -> Result<TrainOutcome> {
    let p = data.train.n_features();
    let maskable = data.train.maskable.clone();
    if ell > maskable.len() {
        return Err(Error::Domain(format!(
            "subset size {ell} exceeds {} maskable features",
            maskable.len()
        )));
    }
    let seed = cfg.seed ^ (ell as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_a5a5);
    fit_loop(
        data,
        cfg,
        start.clone(),
        |_| sample_fixed_adversarial(ell, p, &maskable, &mut train_rng),
        |params| {
            let alpha = sample_fixed_adversarial(ell, p, &maskable, &mut val_rng)?;
            Ok((mse(params, data.val, &alpha)?, alpha))
        },
    )
}

/// Per-iteration adversarial training trace:
/// `iteration,train_missing,val_missing,val_loss`, features `;`-separated.
pub fn write_adversarial_trace_csv(trace: &TrainTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let join = |v: &[usize]| v.iter().map(|j| j.to_string()).collect::<Vec<_>>().join(";");
    writeln!(w, "iteration,train_missing,val_missing,val_loss").map_err(io)?;
    for r in &trace.records {
        writeln!(
            w,
            "{},{},{},{}",
            r.iteration,
            join(&r.train_missing),
            join(&r.val_missing),
            r.val_loss
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
