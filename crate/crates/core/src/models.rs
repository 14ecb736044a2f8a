//! Linear and feed-forward network forecasters, optionally linearly adaptive
//! in the missing pattern, with exact gradients of the regularized MSE.
//!
//! Adaptive LR predicts `(w + D a)^T x(a)` where `a` is the pattern restricted
//! to the maskable features. Adaptive networks add `D^m a` (one entry per
//! input column of layer `m`) to every row of `W^m`, so a layer computes
//! `W g + (v . g) 1 + b` with `v = D^m a`. The first hidden layer is affine,
//! later hidden layers apply ReLU, and the output is affine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::missingness::MissingPattern;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Lr,
    Nn,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Lr => "LR",
            Family::Nn => "NN",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Width of each hidden layer; ignored for LR.
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden.iter().any(|w| *w == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// What to train: family, hidden widths and whether to adapt to the pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub adaptive: bool,
}

impl ModelSpec {
    pub fn lr(adaptive: bool) -> Self {
        Self {
            family: Family::Lr,
            hidden: Vec::new(),
            adaptive,
        }
    }

    pub fn nn(hidden: Vec<usize>, adaptive: bool) -> Self {
        Self {
            family: Family::Nn,
            hidden,
            adaptive,
        }
    }

    pub fn with_adaptive(&self, adaptive: bool) -> Self {
        Self {
            adaptive,
            ..self.clone()
        }
    }

    pub fn init(&self, ds: &Dataset, seed: u64) -> Result<ModelParams> {
        let arch = Architecture {
            input_dim: ds.n_features(),
            hidden: self.hidden.clone(),
        };
        init_params(
            &arch,
            self.family,
            self.adaptive,
            &ds.maskable,
            ds.bias_index(),
            seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    /// `in x |P|`: column `j` is added to every row of `weights` when the
    /// `j`-th maskable feature is missing.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub correction: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Body {
    Linear {
        w: Vec<f64>,
        /// `p x |P|`.
        #[serde(skip_serializing_if = "Option::is_none", default)]
        correction: Option<Matrix>,
    },
    Network {
        layers: Vec<Layer>,
        output_w: Vec<f64>,
        output_b: f64,
        /// `width_M x |P|`.
        #[serde(skip_serializing_if = "Option::is_none", default)]
        output_correction: Option<Matrix>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub family: Family,
    pub adaptive: bool,
    pub input_dim: usize,
    /// Maskable feature indices, ascending; column `j` of every correction
    /// block belongs to feature `maskable[j]`.
    pub maskable: Vec<usize>,
    /// LR weight of this feature is the model bias and is not decayed.
    pub bias_feature: Option<usize>,
    pub body: Body,
}

/// Which entries of a parameter block enter the weight-decay penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Decay {
    All,
    None,
    AllBut(usize),
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Scaled-uniform initialization: every weight and bias is drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; correction blocks start at zero.
pub fn init_params(
    arch: &Architecture,
    family: Family,
    adaptive: bool,
    maskable: &[usize],
    bias_feature: Option<usize>,
    seed: u64,
) -> Result<ModelParams> {
    arch.validate()?;
    if maskable.iter().any(|j| *j >= arch.input_dim) || bias_feature.is_some_and(|b| b >= arch.input_dim)
    {
        return Err(Error::Config("feature index outside input dimension".into()));
    }
    if family == Family::Nn && arch.hidden.is_empty() {
        return Err(Error::Config("a network needs at least one hidden layer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_mask = maskable.len();
    let p = arch.input_dim;
    let body = match family {
        Family::Lr => Body::Linear {
            w: uniform_vec(&mut rng, p, 1.0 / (p as f64).sqrt()),
            correction: adaptive.then(|| Matrix::zeros(p, n_mask)),
        },
        Family::Nn => {
            let mut layers = Vec::with_capacity(arch.hidden.len());
            let mut fan_in = p;
            for &width in &arch.hidden {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights = Matrix::from_vec(width, fan_in, uniform_vec(&mut rng, width * fan_in, bound));
                let bias = uniform_vec(&mut rng, width, bound);
                layers.push(Layer {
                    weights,
                    bias,
                    correction: adaptive.then(|| Matrix::zeros(fan_in, n_mask)),
                });
                fan_in = width;
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            let output_w = uniform_vec(&mut rng, fan_in, bound);
            let output_b = rng.random_range(-bound..bound);
            Body::Network {
                layers,
                output_w,
                output_b,
                output_correction: adaptive.then(|| Matrix::zeros(fan_in, n_mask)),
            }
        }
    };
    Ok(ModelParams {
        family,
        adaptive,
        input_dim: p,
        maskable: maskable.to_vec(),
        bias_feature,
        body,
    })
}

impl ModelParams {
    /// Same shapes, all entries zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.fill(0.0);
        }
        z
    }

    /// Parameter blocks in a fixed order (used by optimizers and gradient checks).
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        match &self.body {
            Body::Linear { w, correction } => {
                out.push(w);
                if let Some(d) = correction {
                    out.push(&d.data);
                }
            }
            Body::Network {
                layers,
                output_w,
                output_b,
                output_correction,
            } => {
                for l in layers {
                    out.push(&l.weights.data);
                    out.push(&l.bias);
                    if let Some(d) = &l.correction {
                        out.push(&d.data);
                    }
                }
                out.push(output_w);
                out.push(std::slice::from_ref(output_b));
                if let Some(d) = output_correction {
                    out.push(&d.data);
                }
            }
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        match &mut self.body {
            Body::Linear { w, correction } => {
                out.push(w);
                if let Some(d) = correction {
                    out.push(&mut d.data);
                }
            }
            Body::Network {
                layers,
                output_w,
                output_b,
                output_correction,
            } => {
                for l in layers {
                    out.push(&mut l.weights.data);
                    out.push(&mut l.bias);
                    if let Some(d) = &mut l.correction {
                        out.push(&mut d.data);
                    }
                }
                out.push(output_w);
                out.push(std::slice::from_mut(output_b));
                if let Some(d) = output_correction {
                    out.push(&mut d.data);
                }
            }
        }
        out
    }

    fn decay_rules(&self) -> Vec<Decay> {
        let mut out = Vec::new();
        match &self.body {
            Body::Linear { correction, .. } => {
                out.push(self.bias_feature.map_or(Decay::All, Decay::AllBut));
                if correction.is_some() {
                    out.push(Decay::All);
                }
            }
            Body::Network {
                layers,
                output_correction,
                ..
            } => {
                for l in layers {
                    out.push(Decay::All);
                    out.push(Decay::None);
                    if l.correction.is_some() {
                        out.push(Decay::All);
                    }
                }
                out.push(Decay::All);
                out.push(Decay::None);
                if output_correction.is_some() {
                    out.push(Decay::All);
                }
            }
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Sum of squared decayed entries (all weights and corrections; no biases).
    pub fn decay_penalty(&self) -> f64 {
        self.blocks()
            .iter()
            .zip(self.decay_rules())
            .map(|(b, rule)| match rule {
                Decay::All => b.iter().map(|v| v * v).sum(),
                Decay::None => 0.0,
                Decay::AllBut(k) => b
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != k)
                    .map(|(_, v)| v * v)
                    .sum(),
            })
            .sum()
    }

    fn add_decay_grad(&self, grads: &mut ModelParams, weight_decay: f64) {
        let rules = self.decay_rules();
        let src = self.blocks();
        for ((g, s), rule) in grads.blocks_mut().into_iter().zip(src).zip(rules) {
            for (i, (gv, sv)) in g.iter_mut().zip(s).enumerate() {
                let on = match rule {
                    Decay::All => true,
                    Decay::None => false,
                    Decay::AllBut(k) => i != k,
                };
                if on {
                    *gv += 2.0 * weight_decay * sv;
                }
            }
        }
    }

    /// Checks that the parameter shapes agree with `ds`.
    pub fn check_compatible(&self, ds: &Dataset) -> Result<()> {
        if self.input_dim != ds.n_features() || self.maskable != ds.maskable {
            return Err(Error::Config(format!(
                "model expects {} features ({} maskable) but data has {} ({} maskable)",
                self.input_dim,
                self.maskable.len(),
                ds.n_features(),
                ds.maskable.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_shapes(&self, x_len: usize, alpha: &MissingPattern) -> Result<()> {
        if x_len != self.input_dim {
            return Err(Error::Domain(format!(
                "feature vector has length {x_len}, model expects {}",
                self.input_dim
            )));
        }
        alpha.validate(self.input_dim, &self.maskable)
    }

    /// Parameters with the pattern-dependent corrections folded in.
    fn resolve(&self, alpha: &MissingPattern) -> Resolved<'_> {
        let a = alpha.restricted(&self.maskable);
        let shift = |d: &Option<Matrix>, len: usize| -> Vec<f64> {
            match d {
                Some(d) if a.iter().any(|v| *v != 0.0) => {
                    (0..d.rows).map(|r| dot(d.row(r), &a)).collect()
                }
                _ => vec![0.0; len],
            }
        };
        match &self.body {
            Body::Linear { w, correction } => {
                let s = shift(correction, w.len());
                Resolved {
                    params: self,
                    a,
                    lr_w: w.iter().zip(&s).map(|(x, y)| x + y).collect(),
                    layer_shift: Vec::new(),
                    out_w: Vec::new(),
                }
            }
            Body::Network {
                layers,
                output_w,
                output_correction,
                ..
            } => {
                let layer_shift = layers
                    .iter()
                    .map(|l| shift(&l.correction, l.weights.cols))
                    .collect();
                let s = shift(output_correction, output_w.len());
                Resolved {
                    params: self,
                    a,
                    lr_w: Vec::new(),
                    layer_shift,
                    out_w: output_w.iter().zip(&s).map(|(x, y)| x + y).collect(),
                }
            }
        }
    }
}

/// Parameters specialised to one pattern.
struct Resolved<'a> {
    params: &'a ModelParams,
    /// Pattern restricted to the maskable features.
    a: Vec<f64>,
    lr_w: Vec<f64>,
    layer_shift: Vec<Vec<f64>>,
    out_w: Vec<f64>,
}

/// Scratch space for one network forward/backward pass.
#[derive(Default)]
struct Workspace {
    acts: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
}

impl Resolved<'_> {
    /// Prediction for an already-masked input, caching activations in `ws`.
    fn predict(&self, xm: &[f64], ws: &mut Workspace) -> f64 {
        match &self.params.body {
            Body::Linear { .. } => dot(&self.lr_w, xm),
            Body::Network {
                layers, output_b, ..
            } => {
                ws.acts.resize(layers.len() + 1, Vec::new());
                ws.pres.resize(layers.len(), Vec::new());
                ws.acts[0].clear();
                ws.acts[0].extend_from_slice(xm);
                for (m, l) in layers.iter().enumerate() {
                    let (before, after) = ws.acts.split_at_mut(m + 1);
                    let g = &before[m];
                    let s = dot(&self.layer_shift[m], g);
                    let pre = &mut ws.pres[m];
                    pre.clear();
                    pre.extend(
                        (0..l.weights.rows).map(|r| dot(l.weights.row(r), g) + s + l.bias[r]),
                    );
                    let next = &mut after[0];
                    next.clear();
                    if m == 0 {
                        next.extend_from_slice(pre);
                    } else {
                        next.extend(pre.iter().map(|v| v.max(0.0)));
                    }
                }
                dot(&self.out_w, &ws.acts[layers.len()]) + output_b
            }
        }
    }

    /// Accumulates gradients of `coef * f(x)` for the last `predict` call.
    ///
    /// `shift_grads[m]` collects the gradient with respect to the layer's
    /// correction vector `v = D^m a`; it is mapped to `D^m` by the caller.
    fn backprop(&self, xm: &[f64], coef: f64, ws: &mut Workspace, grads: &mut ModelParams, shift_grads: &mut [Vec<f64>]) {
        match (&self.params.body, &mut grads.body) {
            (Body::Linear { .. }, Body::Linear { w, .. }) => {
                for (gw, xv) in w.iter_mut().zip(xm) {
                    *gw += coef * xv;
                }
                for (sg, xv) in shift_grads[0].iter_mut().zip(xm) {
                    *sg += coef * xv;
                }
            }
            (
                Body::Network { layers, .. },
                Body::Network {
                    layers: g_layers,
                    output_w: g_out_w,
                    output_b: g_out_b,
                    ..
                },
            ) => {
                let depth = layers.len();
                let top = &ws.acts[depth];
                for (gw, av) in g_out_w.iter_mut().zip(top) {
                    *gw += coef * av;
                }
                *g_out_b += coef;
                for (sg, av) in shift_grads[depth].iter_mut().zip(top) {
                    *sg += coef * av;
                }
                let mut dg: Vec<f64> = self.out_w.iter().map(|w| coef * w).collect();
                for m in (0..depth).rev() {
                    let l = &layers[m];
                    let pre = &ws.pres[m];
                    let g_in = &ws.acts[m];
                    let dpre: Vec<f64> = if m == 0 {
                        dg
                    } else {
                        dg.iter()
                            .zip(pre)
                            .map(|(d, p)| if *p > 0.0 { *d } else { 0.0 })
                            .collect()
                    };
                    let dsum: f64 = dpre.iter().sum();
                    let gl = &mut g_layers[m];
                    for (r, dr) in dpre.iter().enumerate() {
                        if *dr == 0.0 {
                            continue;
                        }
                        gl.bias[r] += dr;
                        for (gw, gv) in gl.weights.row_mut(r).iter_mut().zip(g_in) {
                            *gw += dr * gv;
                        }
                    }
                    for (sg, gv) in shift_grads[m].iter_mut().zip(g_in) {
                        *sg += dsum * gv;
                    }
                    if m > 0 {
                        let shift = &self.layer_shift[m];
                        let mut next = vec![0.0; l.weights.cols];
                        for (r, dr) in dpre.iter().enumerate() {
                            if *dr == 0.0 {
                                continue;
                            }
                            for (n, wv) in next.iter_mut().zip(l.weights.row(r)) {
                                *n += dr * wv;
                            }
                        }
                        for (n, sv) in next.iter_mut().zip(shift) {
                            *n += dsum * sv;
                        }
                        dg = next;
                    } else {
                        dg = Vec::new();
                    }
                }
            }
            _ => unreachable!("gradient buffer shaped like params"),
        }
    }

    fn shift_buffers(&self) -> Vec<Vec<f64>> {
        match &self.params.body {
            Body::Linear { w, .. } => vec![vec![0.0; w.len()]],
            Body::Network {
                layers, output_w, ..
            } => layers
                .iter()
                .map(|l| vec![0.0; l.weights.cols])
                .chain(std::iter::once(vec![0.0; output_w.len()]))
                .collect(),
        }
    }

    /// Maps accumulated correction-vector gradients onto the `D` blocks.
    fn flush_shift_grads(&self, shift_grads: &[Vec<f64>], grads: &mut ModelParams) {
        let outer = |d: &mut Matrix, sg: &[f64]| {
            for (c, s) in sg.iter().enumerate() {
                if *s == 0.0 {
                    continue;
                }
                for (dv, av) in d.row_mut(c).iter_mut().zip(&self.a) {
                    *dv += s * av;
                }
            }
        };
        match &mut grads.body {
            Body::Linear { correction, .. } => {
                if let Some(d) = correction {
                    outer(d, &shift_grads[0]);
                }
            }
            Body::Network {
                layers,
                output_correction,
                ..
            } => {
                for (l, sg) in layers.iter_mut().zip(shift_grads) {
                    if let Some(d) = &mut l.correction {
                        outer(d, sg);
                    }
                }
                if let Some(d) = output_correction {
                    outer(d, &shift_grads[layers.len()]);
                }
            }
        }
    }
}

/// Prediction for one feature vector under pattern `alpha`.
pub fn forward(params: &ModelParams, x: &[f64], alpha: &MissingPattern) -> Result<f64> {
    params.check_shapes(x.len(), alpha)?;
    let resolved = params.resolve(alpha);
    let xm = crate::missingness::mask_unchecked(x, alpha);
    Ok(resolved.predict(&xm, &mut Workspace::default()))
}

/// Missing patterns for a batch: one shared by all rows, or one per row.
#[derive(Debug, Clone, Copy)]
pub enum BatchAlpha<'a> {
    Shared(&'a MissingPattern),
    PerRow(&'a [MissingPattern]),
}

#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a Matrix,
    pub y: &'a [f64],
    pub alpha: BatchAlpha<'a>,
}

impl<'a> Batch<'a> {
    pub fn shared(x: &'a Matrix, y: &'a [f64], alpha: &'a MissingPattern) -> Self {
        Self {
            x,
            y,
            alpha: BatchAlpha::Shared(alpha),
        }
    }

    fn validate(&self, params: &ModelParams) -> Result<()> {
        if self.x.rows == 0 {
            return Err(Error::Size("empty batch".into()));
        }
        if self.y.len() != self.x.rows {
            return Err(Error::Size(format!(
                "{} targets for {} rows",
                self.y.len(),
                self.x.rows
            )));
        }
        match self.alpha {
            BatchAlpha::Shared(a) => params.check_shapes(self.x.cols, a),
            BatchAlpha::PerRow(all) => {
                if all.len() != self.x.rows {
                    return Err(Error::Size(format!(
                        "{} patterns for {} rows",
                        all.len(),
                        self.x.rows
                    )));
                }
                all.iter().try_for_each(|a| params.check_shapes(self.x.cols, a))
            }
        }
    }
}

/// Regularized MSE and its exact gradient:
/// `mean((f - y)^2) + weight_decay * sum(decayed entries^2)`.
pub fn loss_and_grad(params: &ModelParams, batch: &Batch<'_>, weight_decay: f64) -> Result<(f64, ModelParams)> {
    batch.validate(params)?;
    let n = batch.x.rows;
    let mut grads = params.zeros_like();
    let mut ws = Workspace::default();
    let mut sse = 0.0;
    let mut run_group = |resolved: &Resolved<'_>, rows: &mut dyn Iterator<Item = usize>, alpha: &MissingPattern, grads: &mut ModelParams| {
        let mut shift_grads = resolved.shift_buffers();
        let mut xm = vec![0.0; batch.x.cols];
        for i in rows {
            for ((o, v), b) in xm.iter_mut().zip(batch.x.row(i)).zip(&alpha.bits) {
                *o = if *b != 0 { 0.0 } else { *v };
            }
            let pred = resolved.predict(&xm, &mut ws);
            let e = pred - batch.y[i];
            sse += e * e;
            resolved.backprop(&xm, 2.0 * e / n as f64, &mut ws, grads, &mut shift_grads);
        }
        resolved.flush_shift_grads(&shift_grads, grads);
    };
    match batch.alpha {
        BatchAlpha::Shared(a) => {
            let resolved = params.resolve(a);
            run_group(&resolved, &mut (0..n), a, &mut grads);
        }
        BatchAlpha::PerRow(all) => {
            for (i, a) in all.iter().enumerate() {
                let resolved = params.resolve(a);
                run_group(&resolved, &mut std::iter::once(i), a, &mut grads);
            }
        }
    }
    let mut loss = sse / n as f64;
    if weight_decay != 0.0 {
        loss += weight_decay * params.decay_penalty();
        params.add_decay_grad(&mut grads, weight_decay);
    }
    Ok((loss, grads))
}

/// Predictions for every row.
pub fn predict_rows(params: &ModelParams, x: &Matrix, alpha: BatchAlpha<'_>) -> Result<Vec<f64>> {
    let mut ws = Workspace::default();
    let mut xm = vec![0.0; x.cols];
    let mut run = |resolved: &Resolved<'_>, i: usize, a: &MissingPattern, ws: &mut Workspace| {
        for ((o, v), b) in xm.iter_mut().zip(x.row(i)).zip(&a.bits) {
            *o = if *b != 0 { 0.0 } else { *v };
        }
        resolved.predict(&xm, ws)
    };
    match alpha {
        BatchAlpha::Shared(a) => {
            params.check_shapes(x.cols, a)?;
            let resolved = params.resolve(a);
            Ok((0..x.rows).map(|i| run(&resolved, i, a, &mut ws)).collect())
        }
        BatchAlpha::PerRow(all) => {
            if all.len() != x.rows {
                return Err(Error::Size(format!("{} patterns for {} rows", all.len(), x.rows)));
            }
            let mut out = Vec::with_capacity(x.rows);
            for (i, a) in all.iter().enumerate() {
                params.check_shapes(x.cols, a)?;
                let resolved = params.resolve(a);
                out.push(run(&resolved, i, a, &mut ws));
            }
            Ok(out)
        }
    }
}

/// Plain mean squared error (no penalty) of `params` on `ds` under one pattern.
pub fn mse(params: &ModelParams, ds: &Dataset, alpha: &MissingPattern) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Size("empty dataset".into()));
    }
    let preds = predict_rows(params, &ds.x, BatchAlpha::Shared(alpha))?;
    Ok(preds
        .iter()
        .zip(&ds.y)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / ds.n_rows() as f64)
}
