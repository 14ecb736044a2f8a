mod common;

use mfcast::adversarial::train_adversarial_from;
use mfcast::models::{mse, Body};
use mfcast::training::{train_nominal, TrainData};
use mfcast::{apply_mask, forward, loss_and_grad, models::Batch, AdvSearchScope, MissingPattern, ModelParams, ModelSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn perturb_non_corrections(params: &mut ModelParams, rng: &mut ChaCha8Rng) {
    let corrections: Vec<*const f64> = correction_ptrs(params);
    for b in params.blocks_mut() {
        if corrections.contains(&b.as_ptr()) {
            continue;
        }
        for v in b.iter_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
}

fn correction_ptrs(params: &ModelParams) -> Vec<*const f64> {
    match &params.body {
        Body::Linear { correction, .. } => correction.iter().map(|d| d.data.as_ptr()).collect(),
        Body::Network { layers, output_correction, .. } => layers
            .iter()
            .filter_map(|l| l.correction.as_ref())
            .chain(output_correction.as_ref())
            .map(|d| d.data.as_ptr())
            .collect(),
    }
}

fn strip_corrections(params: &ModelParams) -> ModelParams {
    let mut plain = params.clone();
    plain.adaptive = false;
    match &mut plain.body {
        Body::Linear { correction, .. } => *correction = None,
        Body::Network { layers, output_correction, .. } => {
            *output_correction = None;
            for l in layers.iter_mut() {
                l.correction = None;
            }
        }
    }
    plain
}

fn spec_for(nn: bool, adaptive: bool, width: usize) -> ModelSpec {
    if nn {
        ModelSpec::nn(vec![width, width], adaptive)
    } else {
        ModelSpec::lr(adaptive)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_correction_reduces_to_plain_model(seed in any::<u64>(), m in 1usize..6, width in 1usize..5, nn in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = common::random_dataset(&mut rng, 4, m);
        let mut adaptive = spec_for(nn, true, width).init(&ds, seed).unwrap();
        perturb_non_corrections(&mut adaptive, &mut rng);
        let plain = strip_corrections(&adaptive);
        for r in 0..ds.n_rows() {
            let alpha = common::random_pattern(&mut rng, ds.n_features(), &ds.maskable);
            prop_assert_eq!(
                forward(&adaptive, ds.x.row(r), &alpha).unwrap(),
                forward(&plain, ds.x.row(r), &alpha).unwrap()
            );
        }
    }

    #[test]
    fn zero_pattern_is_identity_masking(seed in any::<u64>(), m in 1usize..6, nn in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = common::random_dataset(&mut rng, 3, m);
        let mut params = spec_for(nn, true, 3).init(&ds, seed).unwrap();
        for b in params.blocks_mut() {
            for v in b.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        // With nothing missing, neither masking nor the corrections matter.
        let plain = strip_corrections(&params);
        let zero = MissingPattern::zeros(ds.n_features());
        for r in 0..ds.n_rows() {
            let x = ds.x.row(r);
            prop_assert_eq!(apply_mask(x, &zero, &ds.maskable).unwrap(), x.to_vec());
            prop_assert_eq!(forward(&params, x, &zero).unwrap(), forward(&plain, x, &zero).unwrap());
        }
    }

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>(), m in 1usize..5, width in 1usize..4, nn in any::<bool>(), adaptive in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = common::random_dataset(&mut rng, 6, m);
        let mut params = spec_for(nn, adaptive, width).init(&ds, seed).unwrap();
        for b in params.blocks_mut() {
            for v in b.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let alpha = common::random_pattern(&mut rng, ds.n_features(), &ds.maskable);
        let wd = 1e-3;
        let loss = |p: &ModelParams| mse(p, &ds, &alpha).unwrap() + wd * p.decay_penalty();
        let (_, grads) = loss_and_grad(&params, &Batch::shared(&ds.x, &ds.y, &alpha), wd).unwrap();
        let analytic: Vec<f64> = grads.blocks().iter().flat_map(|b| b.iter().copied()).collect();
        let n_blocks = params.blocks().len();
        let mut k = 0;
        for bi in 0..n_blocks {
            let len = params.blocks()[bi].len();
            for i in 0..len {
                let h = 1e-6;
                let mut plus = params.clone();
                plus.blocks_mut()[bi][i] += h;
                let mut minus = params.clone();
                minus.blocks_mut()[bi][i] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let err = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-4);
                prop_assert!(err < 1e-4, "block {} entry {}: fd {} analytic {}", bi, i, fd, analytic[k]);
                k += 1;
            }
        }
    }
}

#[test]
fn training_is_deterministic_and_reports_trace_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let ds = common::planted_dataset(&mut rng, 200, &[0.8, -0.5, 0.3], 0.1);
    let (tr, va) = (ds.rows(0, 150), ds.rows(150, 200));
    let data = TrainData::new(&tr, &va).unwrap();
    let alpha = MissingPattern::zeros(ds.n_features());
    for spec in [ModelSpec::lr(false), ModelSpec::nn(vec![6, 4], true)] {
        let mut cfg = common::small_cfg(7, 60);
        cfg.shuffle = true;
        let a = train_nominal(data, &alpha, &cfg, &spec, None).unwrap();
        let b = train_nominal(data, &alpha, &cfg, &spec, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.loss, a.trace.min_val_loss());
        assert!(a.trace.iterations() <= cfg.max_iters);
        assert!(a.trace.last_iteration() - a.trace.best_iteration <= cfg.patience);
        // The returned parameters reproduce the reported loss.
        assert!((mse(&a.params, &va, &alpha).unwrap() - a.loss).abs() <= 1e-12 * a.loss.max(1.0));
    }
}

#[test]
fn warm_start_never_loses_ground() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let ds = common::planted_dataset(&mut rng, 160, &[1.0, 0.6, -0.4], 0.05);
    let (tr, va) = (ds.rows(0, 120), ds.rows(120, 160));
    let data = TrainData::new(&tr, &va).unwrap();
    let cfg = common::small_cfg(2, 40);
    let zero = MissingPattern::zeros(ds.n_features());
    let opt = train_nominal(data, &zero, &cfg, &ModelSpec::lr(true), None).unwrap();
    let scope = AdvSearchScope::full(ds.n_features(), &ds.maskable, 2);
    let adv = train_adversarial_from(data, &scope, &cfg, &opt.params).unwrap();
    let first = &adv.trace.records[0];
    assert_eq!(first.iteration, 0);
    assert!(first.val_loss.is_finite());
    // Best recorded adversarial loss is no worse than any prefix of the trace.
    let mut running = f64::INFINITY;
    for r in &adv.trace.records {
        running = running.min(r.val_loss);
        assert!(adv.loss <= running);
    }
}

#[test]
fn adversarial_training_lowers_worst_case_loss() {
    // Target depends on feature 0 only; feature 1 duplicates it, feature 2 is noise.
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut ds = common::random_dataset(&mut rng, 300, 3);
    for r in 0..ds.n_rows() {
        let v = ds.x.get(r, 0);
        ds.x.set(r, 1, v);
        ds.y[r] = 2.0 * v;
    }
    let (tr, va) = (ds.rows(0, 220), ds.rows(220, 300));
    let data = TrainData::new(&tr, &va).unwrap();
    let cfg = common::small_cfg(3, 300);
    let zero = MissingPattern::zeros(ds.n_features());
    let opt = train_nominal(data, &zero, &cfg, &ModelSpec::lr(false), None).unwrap();
    let scope = AdvSearchScope::full(ds.n_features(), &ds.maskable, 1);
    let adv = train_adversarial_from(data, &scope, &cfg, &opt.params).unwrap();
    let worst = |p: &ModelParams| {
        (0..3)
            .map(|j| mse(p, &va, &zero.with(j)).unwrap())
            .fold(mse(p, &va, &zero).unwrap(), f64::max)
    };
    assert!(worst(&adv.params) <= worst(&opt.params), "{} vs {}", worst(&adv.params), worst(&opt.params));
}
