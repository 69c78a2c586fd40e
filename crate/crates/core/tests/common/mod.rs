#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reinpatch::backbone::{task_loss_graph, Backbone, BackboneConfig, ForecastWindow};
use reinpatch::graph::{Graph, ParamStore};
use reinpatch::partition::{BoundaryVector, CompressionConfig};
use reinpatch::policy::{PatchPolicy, PolicyConfig, PolicyMode};
use reinpatch::tensor::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_policy(seed: u64, mode: PolicyMode, levels: usize, context: usize) -> PatchPolicy {
    let cfg = PolicyConfig {
        d_patch: 8,
        depth: 2,
        heads: 2,
        num_levels: levels,
        mode,
        context_limit: context,
        init_boundary_rate: None,
    };
    PatchPolicy::new(cfg, &mut rng(seed)).unwrap()
}

pub fn small_backbone_config(lookback: usize, horizon: usize) -> BackboneConfig {
    BackboneConfig {
        d_model: 8,
        d_latent: 8,
        latent_depth: 1,
        heads: 2,
        horizon,
        lookback,
        levels: 1,
        ..BackboneConfig::default()
    }
}

pub fn random_series(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

pub fn random_window(rng: &mut impl Rng, lookback: usize, horizon: usize) -> ForecastWindow {
    ForecastWindow::new(random_series(rng, lookback), random_series(rng, horizon), 0).unwrap()
}

pub fn random_levels(rng: &mut impl Rng, n: usize, levels: usize) -> BoundaryVector {
    BoundaryVector::new((0..n).map(|_| rng.random_range(0..=levels)).collect(), levels).unwrap()
}

/// log pi(b | x) and its parameter gradients.
pub fn log_prob_and_grads(policy: &PatchPolicy, x: &[f64], b: &BoundaryVector) -> (f64, Vec<Matrix>) {
    let mut g = Graph::new();
    let p = policy.params().bind(&mut g);
    let logits = policy.forward_graph(&mut g, &p, x).unwrap();
    let lsm = g.log_softmax(logits);
    let picked = g.pick(lsm, b.levels());
    let lp = g.sum(picked);
    let value = g.scalar(lp);
    (value, g.backward(lp).for_params(&p, policy.params()))
}

pub fn task_loss_and_grads(
    backbone: &Backbone,
    window: &ForecastWindow,
    b: &BoundaryVector,
    compression: &CompressionConfig,
) -> (f64, Vec<Matrix>) {
    let enforced = reinpatch::partition::enforce_min_compression(b, compression);
    let parts = backbone.partitions_for(&enforced).unwrap();
    let mut g = Graph::new();
    let p = backbone.params().bind(&mut g);
    let pred = backbone.forecast_graph(&mut g, &p, window, &parts).unwrap();
    let loss = task_loss_graph(&mut g, pred, &window.target);
    let value = g.scalar(loss);
    (value, g.backward(loss).for_params(&p, backbone.params()))
}

/// Largest per-tensor relative error `|a - n| / max(|a|, |n|)` (Euclidean
/// norms) between analytic gradients and central differences with step `h`.
/// Tensors whose gradients are both below `1e-9` are skipped.
pub fn max_fd_error<M>(
    model: &mut M,
    store: impl Fn(&mut M) -> &mut ParamStore,
    f: impl Fn(&M) -> f64,
    analytic: &[Matrix],
    h: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.data().len());
        for j in 0..a.data().len() {
            let orig = store(model).values()[i].data()[j];
            store(model).values_mut()[i].data_mut()[j] = orig + h;
            let up = f(model);
            store(model).values_mut()[i].data_mut()[j] = orig - h;
            let down = f(model);
            store(model).values_mut()[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let diff = a.data().iter().zip(&numeric).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na.max(nn) < 1e-9 {
            continue;
        }
        worst = worst.max(diff / na.max(nn));
    }
    worst
}
