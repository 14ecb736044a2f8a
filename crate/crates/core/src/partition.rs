//! Budgeted uncertainty sets and their partitions.
//!
//! A learned partition is a binary tree over equality constraints
//! (`alpha_j = 0` / `alpha_j = 1`). Each node carries an optimistic model
//! trained at its most favourable pattern and an adversarial model trained
//! against the rest of its set; the validation losses of the two are its
//! lower and upper bounds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversarial::{best_single_feature, train_adversarial_from, train_fixed_sampled, AdvSearchScope};
use crate::error::{Error, Result};
use crate::missingness::MissingPattern;
use crate::models::{forward, ModelParams, ModelSpec};
use crate::training::{train_nominal, TrainConfig, TrainData};

/// Largest maskable set `enumerate_patterns` will expand.
pub const ENUMERATION_LIMIT: usize = 20;
/// Denominator floor for the relative gap.
pub const RELGAP_FLOOR: f64 = 1e-12;
/// Relative gaps above this are displayed as `inf`.
pub const RELGAP_DISPLAY_CAP: f64 = 1e6;

/// Patterns over `maskable` with at most `budget` missing features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySet {
    pub n_features: usize,
    pub maskable: Vec<usize>,
    pub budget: usize,
}

impl UncertaintySet {
    pub fn new(n_features: usize, maskable: Vec<usize>, budget: usize) -> Result<Self> {
        let u = Self {
            n_features,
            maskable,
            budget,
        };
        u.validate()?;
        Ok(u)
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget > self.maskable.len() {
            return Err(Error::Config(format!(
                "budget {} exceeds the {} maskable features",
                self.budget,
                self.maskable.len()
            )));
        }
        if self.maskable.windows(2).any(|w| w[0] >= w[1])
            || self.maskable.last().is_some_and(|&j| j >= self.n_features)
        {
            return Err(Error::Config("maskable indices must be sorted, unique and in range".into()));
        }
        Ok(())
    }

    pub fn contains(&self, alpha: &MissingPattern) -> bool {
        alpha.validate(self.n_features, &self.maskable).is_ok() && alpha.popcount() <= self.budget
    }
}

/// All patterns of `u` in lexicographic order of their bit vectors.
pub fn enumerate_patterns(u: &UncertaintySet) -> Result<Vec<MissingPattern>> {
    let m = u.maskable.len();
    if m > ENUMERATION_LIMIT {
        return Err(Error::Capacity(format!(
            "refusing to enumerate patterns over {m} maskable features (limit {ENUMERATION_LIMIT})"
        )));
    }
    let mut out = Vec::new();
    for mask in 0u32..(1u32 << m) {
        if mask.count_ones() as usize > u.budget {
            continue;
        }
        let mut a = MissingPattern::zeros(u.n_features);
        for (k, &j) in u.maskable.iter().enumerate() {
            if mask & (1 << k) != 0 {
                a.set(j, true);
            }
        }
        out.push(a);
    }
    out.sort();
    Ok(out)
}

pub fn relgap(lb: f64, ub: f64) -> f64 {
    (ub - lb) / lb.max(RELGAP_FLOOR)
}

pub fn format_relgap(gap: f64) -> String {
    if gap > RELGAP_DISPLAY_CAP {
        "inf".to_string()
    } else {
        format!("{:.2}%", 100.0 * gap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySubset {
    pub id: usize,
    /// Equality constraints collected along the tree path.
    pub fixed: BTreeMap<usize, u8>,
    pub alpha_opt: MissingPattern,
    /// Maskable features not yet constrained.
    pub free: Vec<usize>,
    pub theta_opt: ModelParams,
    pub theta_adv: ModelParams,
    pub lb: f64,
    pub ub: f64,
    pub relgap: f64,
}

impl UncertaintySubset {
    /// True when the subset holds a single pattern: nothing left free, or
    /// the budget is already spent by the fixed-missing features.
    pub fn is_singleton(&self, budget: usize) -> bool {
        self.free.is_empty() || self.alpha_opt.popcount() >= budget
    }

    pub fn contains(&self, alpha: &MissingPattern) -> bool {
        self.fixed
            .iter()
            .all(|(&j, &v)| alpha.is_missing(j) == (v == 1))
    }

    /// Parameters used for a realized pattern routed here.
    pub fn params_for(&self, alpha: &MissingPattern) -> &ModelParams {
        if *alpha == self.alpha_opt {
            &self.theta_opt
        } else {
            &self.theta_adv
        }
    }

    fn scope(&self, budget: usize) -> AdvSearchScope {
        AdvSearchScope::new(self.free.clone(), budget, self.alpha_opt.clone())
    }

    /// Collapses the bounds of a singleton: its only pattern is `alpha_opt`,
    /// so the worst case coincides with the optimistic model.
    fn resolve_singleton(&mut self) {
        self.theta_adv = self.theta_opt.clone();
        self.ub = self.lb;
        self.relgap = 0.0;
    }

    fn set_bounds(&mut self, lb: f64, ub: f64) {
        self.lb = lb;
        self.ub = ub;
        self.relgap = relgap(lb, ub);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitNode {
    pub feature: usize,
    /// Child with the feature constrained available.
    pub available: usize,
    /// Child with the feature constrained missing.
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionNode {
    pub subset: UncertaintySubset,
    pub parent: Option<usize>,
    pub split: Option<SplitNode>,
}

/// Bounds at the moment a split was made, as assigned by the split step
/// (before any singleton collapse of the children).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub parent: usize,
    pub feature: usize,
    pub available_child: usize,
    pub missing_child: usize,
    pub parent_lb: f64,
    pub parent_ub: f64,
    pub available_lb: f64,
    pub available_ub: f64,
    pub missing_lb: f64,
    pub missing_ub: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    pub max_subsets: usize,
    pub epsilon: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            max_subsets: 10,
            epsilon: 0.001,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_subsets == 0 {
            return Err(Error::Config("partition needs at least one subset".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("gap threshold must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxSubsets,
    GapThreshold,
    /// Every leaf is a singleton.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub uncertainty: UncertaintySet,
    pub config: PartitionConfig,
    /// Indexed by subset id; the root is 0.
    pub nodes: Vec<PartitionNode>,
    pub records: Vec<SplitRecord>,
    pub termination: Termination,
}

impl Partition {
    pub fn leaf_ids(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].split.is_none())
            .collect()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &UncertaintySubset> {
        self.nodes
            .iter()
            .filter(|n| n.split.is_none())
            .map(|n| &n.subset)
    }

    pub fn subset(&self, id: usize) -> &UncertaintySubset {
        &self.nodes[id].subset
    }

    pub fn max_relgap(&self) -> f64 {
        self.leaves().map(|s| s.relgap).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Leaf reached by walking the tree with `alpha`. Patterns beyond the
    /// training budget are routed the same way.
    pub fn locate(&self, alpha: &MissingPattern) -> Result<usize> {
        alpha.validate(self.uncertainty.n_features, &self.uncertainty.maskable)?;
        let mut id = 0;
        while let Some(s) = self.nodes[id].split {
            id = if alpha.is_missing(s.feature) { s.missing } else { s.available };
        }
        Ok(id)
    }

    pub fn predict(&self, x: &[f64], alpha: &MissingPattern) -> Result<f64> {
        let leaf = self.subset(self.locate(alpha)?);
        forward(leaf.params_for(alpha), x, alpha)
    }

    /// The partition as it stood after its first `max_subsets - 1` splits.
    /// Construction is greedy and ids are assigned in split order, so this
    /// equals learning with the smaller subset limit.
    pub fn truncate(&self, max_subsets: usize) -> Result<Partition> {
        if max_subsets == 0 {
            return Err(Error::Config("partition needs at least one subset".into()));
        }
        let splits = (max_subsets - 1).min(self.records.len());
        if splits == self.records.len() {
            let mut p = self.clone();
            p.config.max_subsets = max_subsets;
            return Ok(p);
        }
        let keep = 1 + 2 * splits;
        let mut nodes: Vec<PartitionNode> = self.nodes[..keep].to_vec();
        for n in &mut nodes {
            if n.split.is_some_and(|s| s.available >= keep) {
                n.split = None;
            }
        }
        Ok(Partition {
            uncertainty: self.uncertainty.clone(),
            config: PartitionConfig {
                max_subsets,
                ..self.config.clone()
            },
            nodes,
            records: self.records[..splits].to_vec(),
            termination: Termination::MaxSubsets,
        })
    }

    /// Subset, split feature, bounds (scaled by 100) and relative gap.
    pub fn bounds_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:<8} {:>10} {:>10} {:>10}  constraints", "subset", "split", "100*UB", "100*LB", "RelGap");
        for n in &self.nodes {
            let u = &n.subset;
            let split = n.split.map_or("-".to_string(), |sp| format!("a{}", sp.feature));
            let cons = if u.fixed.is_empty() {
                "-".to_string()
            } else {
                u.fixed
                    .iter()
                    .map(|(j, v)| format!("a{j}={v}"))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            let _ = writeln!(
                s,
                "{:<8} {:<8} {:>10.3} {:>10.3} {:>10}  {}",
                format!("U{}", u.id),
                split,
                100.0 * u.ub,
                100.0 * u.lb,
                format_relgap(u.relgap),
                cons
            );
        }
        s
    }
}

fn derived_cfg(cfg: &TrainConfig, id: usize) -> TrainConfig {
    TrainConfig {
        seed: cfg.seed ^ (id as u64 + 1).wrapping_mul(0xd1b5_4a32_d192_ed03),
        ..cfg.clone()
    }
}

fn wrap(id: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Training {
        subset: id,
        source: Box::new(e),
    }
}

/// Learns a partition of `u` by repeatedly splitting the leaf with the
/// largest relative gap between its optimistic and adversarial losses.
pub fn learn_partition(
    data: TrainData<'_>,
    u: &UncertaintySet,
    pcfg: &PartitionConfig,
    cfg: &TrainConfig,
    spec: &ModelSpec,
) -> Result<Partition> {
    pcfg.validate()?;
    u.validate()?;
    cfg.validate()?;
    if u.n_features != data.train.n_features() || u.maskable != data.train.maskable {
        return Err(Error::Config("uncertainty set does not match the dataset features".into()));
    }
    let budget = u.budget;

    let root_alpha = MissingPattern::zeros(u.n_features);
    let root_cfg = derived_cfg(cfg, 0);
    let opt = train_nominal(data, &root_alpha, &root_cfg, spec, None).map_err(wrap(0))?;
    let mut root = UncertaintySubset {
        id: 0,
        fixed: BTreeMap::new(),
        alpha_opt: root_alpha,
        free: u.maskable.clone(),
        theta_adv: opt.params.clone(),
        theta_opt: opt.params,
        lb: opt.loss,
        ub: opt.loss,
        relgap: 0.0,
    };
    if root.is_singleton(budget) {
        root.resolve_singleton();
    } else {
        let adv = train_adversarial_from(data, &root.scope(budget), &root_cfg, &root.theta_opt)
            .map_err(wrap(0))?;
        root.theta_adv = adv.params;
        root.set_bounds(root.lb, adv.loss);
    }

    let mut nodes = vec![PartitionNode {
        subset: root,
        parent: None,
        split: None,
    }];
    let mut records = Vec::new();
    let mut n_leaves = 1;

    let termination = loop {
        if n_leaves >= pcfg.max_subsets {
            break Termination::MaxSubsets;
        }
        let mut pick: Option<usize> = None;
        for (i, n) in nodes.iter().enumerate() {
            if n.split.is_some() || n.subset.is_singleton(budget) {
                continue;
            }
            if pick.is_none_or(|b| n.subset.relgap > nodes[b].subset.relgap) {
                pick = Some(i);
            }
        }
        let Some(l) = pick else { break Termination::Exhausted };
        if nodes[l].subset.relgap <= pcfg.epsilon {
            break Termination::GapThreshold;
        }

        let parent = nodes[l].subset.clone();
        let Some((j, _)) = best_single_feature(data.train, &parent.scope(budget), &parent.theta_opt)
            .map_err(wrap(l))?
        else {
            break Termination::Exhausted;
        };
        let (a_id, m_id) = (nodes.len(), nodes.len() + 1);
        let free: Vec<usize> = parent.free.iter().copied().filter(|&f| f != j).collect();

        let mut avail = parent.clone();
        avail.id = a_id;
        avail.fixed.insert(j, 0);
        avail.free = free.clone();

        let mut miss = parent.clone();
        miss.id = m_id;
        miss.fixed.insert(j, 1);
        miss.free = free;
        miss.alpha_opt.set(j, true);

        let avail_job = || -> Result<Option<(ModelParams, f64)>> {
            if avail.is_singleton(budget) {
                return Ok(None);
            }
            let out = train_adversarial_from(data, &avail.scope(budget), &derived_cfg(cfg, a_id), &avail.theta_opt)
                .map_err(wrap(a_id))?;
            Ok(Some((out.params, out.loss)))
        };
        let miss_job = || -> Result<(ModelParams, f64)> {
            let out = train_nominal(data, &miss.alpha_opt, &derived_cfg(cfg, m_id), spec, Some(&parent.theta_opt))
                .map_err(wrap(m_id))?;
            Ok((out.params, out.loss))
        };
        let (avail_res, miss_res) = rayon::join(avail_job, miss_job);

        // Available child keeps the optimistic side, retrains the adversarial one.
        if let Some((theta, ub)) = avail_res? {
            avail.theta_adv = theta;
            avail.set_bounds(parent.lb, ub);
        } else {
            avail.set_bounds(parent.lb, parent.ub);
        }
        // Missing child keeps the adversarial side, retrains the optimistic one.
        let (theta, lb) = miss_res?;
        miss.theta_opt = theta;
        miss.set_bounds(lb, parent.ub);

        records.push(SplitRecord {
            parent: l,
            feature: j,
            available_child: a_id,
            missing_child: m_id,
            parent_lb: parent.lb,
            parent_ub: parent.ub,
            available_lb: avail.lb,
            available_ub: avail.ub,
            missing_lb: miss.lb,
            missing_ub: miss.ub,
        });
        for child in [&mut avail, &mut miss] {
            if child.is_singleton(budget) {
                child.resolve_singleton();
            }
        }

        nodes[l].split = Some(SplitNode {
            feature: j,
            available: a_id,
            missing: m_id,
        });
        for child in [avail, miss] {
            nodes.push(PartitionNode {
                subset: child,
                parent: Some(l),
                split: None,
            });
        }
        n_leaves += 1;
    };

    Ok(Partition {
        uncertainty: u.clone(),
        config: pcfg.clone(),
        nodes,
        records,
        termination,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedSubset {
    /// Exact number of missing features.
    pub ell: usize,
    pub params: ModelParams,
    pub val_loss: f64,
}

/// Equality partition by missing count: subset `ell` covers patterns with
/// exactly `ell` missing features, `ell = 0..=budget`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPartition {
    pub uncertainty: UncertaintySet,
    pub subsets: Vec<FixedSubset>,
}

impl FixedPartition {
    /// Missing counts above the budget use the last subset.
    pub fn route(&self, alpha: &MissingPattern) -> usize {
        alpha.popcount().min(self.uncertainty.budget)
    }

    pub fn predict(&self, x: &[f64], alpha: &MissingPattern) -> Result<f64> {
        alpha.validate(self.uncertainty.n_features, &self.uncertainty.maskable)?;
        forward(&self.subsets[self.route(alpha)].params, x, alpha)
    }
}

/// Trains the nominal model for `ell = 0` and a sampling-adversarial model
/// for each `ell = 1..=budget`, all warm-started from the nominal one.
pub fn fixed_partition(
    data: TrainData<'_>,
    u: &UncertaintySet,
    cfg: &TrainConfig,
    spec: &ModelSpec,
) -> Result<FixedPartition> {
    use rayon::prelude::*;
    u.validate()?;
    if u.n_features != data.train.n_features() || u.maskable != data.train.maskable {
        return Err(Error::Config("uncertainty set does not match the dataset features".into()));
    }
    let zero = MissingPattern::zeros(u.n_features);
    let nominal = train_nominal(data, &zero, &derived_cfg(cfg, 0), spec, None).map_err(wrap(0))?;
    let rest: Vec<FixedSubset> = (1..=u.budget)
        .into_par_iter()
        .map(|ell| {
            let out = train_fixed_sampled(data, ell, &derived_cfg(cfg, ell), &nominal.params)
                .map_err(wrap(ell))?;
            Ok(FixedSubset {
                ell,
                params: out.params,
                val_loss: out.loss,
            })
        })
        .collect::<Result<_>>()?;
    let mut subsets = vec![FixedSubset {
        ell: 0,
        params: nominal.params,
        val_loss: nominal.loss,
    }];
    subsets.extend(rest);
    Ok(FixedPartition {
        uncertainty: u.clone(),
        subsets,
    })
}

/// Deployable model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    Single { params: ModelParams },
    Learned(Partition),
    Fixed(FixedPartition),
}

impl Artifact {
    pub fn predict(&self, x: &[f64], alpha: &MissingPattern) -> Result<f64> {
        match self {
            Artifact::Single { params } => forward(params, x, alpha),
            Artifact::Learned(p) => p.predict(x, alpha),
            Artifact::Fixed(f) => f.predict(x, alpha),
        }
    }

    /// Any model of the artifact, for shape checks.
    pub fn representative(&self) -> &ModelParams {
        match self {
            Artifact::Single { params } => params,
            Artifact::Learned(p) => &p.nodes[0].subset.theta_opt,
            Artifact::Fixed(f) => &f.subsets[0].params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uset(m: usize, budget: usize) -> UncertaintySet {
        UncertaintySet::new(m, (0..m).collect(), budget).unwrap()
    }

    #[test]
    fn pattern_counts() {
        assert_eq!(enumerate_patterns(&uset(3, 3)).unwrap().len(), 8);
        assert_eq!(enumerate_patterns(&uset(4, 2)).unwrap().len(), 11);
        assert_eq!(enumerate_patterns(&uset(6, 3)).unwrap().len(), 42);
        let zero = enumerate_patterns(&uset(5, 0)).unwrap();
        assert_eq!(zero.len(), 1);
        assert!(zero[0].is_zero());
    }

    #[test]
    fn patterns_are_sorted_and_within_budget() {
        let u = UncertaintySet::new(6, vec![1, 2, 4, 5], 2).unwrap();
        let pats = enumerate_patterns(&u).unwrap();
        assert!(pats.windows(2).all(|w| w[0] < w[1]));
        assert!(pats.iter().all(|a| u.contains(a)));
    }

    #[test]
    fn enumeration_guard() {
        let u = UncertaintySet::new(21, (0..21).collect(), 1).unwrap();
        assert!(matches!(enumerate_patterns(&u), Err(Error::Capacity(_))));
    }

    #[test]
    fn budget_above_maskable_rejected() {
        assert!(UncertaintySet::new(3, vec![0, 1], 3).is_err());
    }

    #[test]
    fn relgap_guard_and_display() {
        assert!((relgap(2.0, 3.0) - 0.5).abs() < 1e-15);
        assert_eq!(format_relgap(relgap(0.0, 1.0)), "inf");
        assert_eq!(format_relgap(0.6121), "61.21%");
    }

    #[test]
    fn partition_config_validation() {
        assert!(PartitionConfig { max_subsets: 0, epsilon: 0.0 }.validate().is_err());
        assert!(PartitionConfig { max_subsets: 1, epsilon: -1.0 }.validate().is_err());
        assert!(PartitionConfig::default().validate().is_ok());
    }
}
