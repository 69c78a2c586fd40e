mod common;

use common::*;
use reinpatch::backbone::{Backbone, DownsampleMode, UpsampleMode};
use reinpatch::partition::{BoundaryVector, CompressionConfig};
use reinpatch::policy::{log_prob, PolicyMode};
use reinpatch::trainer::{AdvantageMode, PolicyRollouts};

const TOL: f64 = 1e-4;

fn check_policy(mode: PolicyMode, levels: usize, seed: u64) {
    let mut r = rng(seed);
    let mut policy = small_policy(seed, mode, levels, 8);
    assert!(policy.params().num_scalars() <= 5000);
    let x = random_series(&mut r, 8);
    let b = random_levels(&mut r, 8, levels);
    let (lp, grads) = log_prob_and_grads(&policy, &x, &b);
    assert!((lp - log_prob(&policy.forward(&x).unwrap(), &b).unwrap()).abs() < 1e-12);
    let err = max_fd_error(
        &mut policy,
        |p| p.params_mut(),
        |p| log_prob(&p.forward(&x).unwrap(), &b).unwrap(),
        &grads,
        1e-5,
    );
    assert!(err < TOL, "{mode:?} L={levels}: relative error {err:e}");
}

#[test]
fn log_prob_gradient_contextual() {
    check_policy(PolicyMode::Contextual, 1, 1);
    check_policy(PolicyMode::Contextual, 2, 2);
}

#[test]
fn log_prob_gradient_causal() {
    check_policy(PolicyMode::Causal, 1, 3);
    check_policy(PolicyMode::Causal, 3, 4);
}

fn check_backbone(down: DownsampleMode, up: UpsampleMode, levels: usize, seed: u64) {
    let mut r = rng(seed);
    let cfg = reinpatch::backbone::BackboneConfig {
        downsample: down,
        upsample: up,
        levels,
        ..small_backbone_config(8, 4)
    };
    let mut backbone = Backbone::new(cfg, &mut r).unwrap();
    assert!(backbone.params().num_scalars() <= 5000, "{}", backbone.params().num_scalars());
    let window = random_window(&mut r, 8, 4);
    let b = random_levels(&mut r, 8, levels);
    let comp = CompressionConfig::new(1.5).unwrap();
    let (_, grads) = task_loss_and_grads(&backbone, &window, &b, &comp);
    let err = max_fd_error(
        &mut backbone,
        |m| m.params_mut(),
        |m| task_loss_and_grads(m, &window, &b, &comp).0,
        &grads,
        1e-5,
    );
    assert!(err < TOL, "{down:?}/{up:?} levels {levels}: relative error {err:e}");
}

#[test]
fn task_loss_gradient_default_modes() {
    check_backbone(DownsampleMode::ScatterMean, UpsampleMode::GatherResidual, 1, 5);
}

#[test]
fn task_loss_gradient_cross_attention() {
    check_backbone(DownsampleMode::CrossAttention, UpsampleMode::CrossAttention, 1, 6);
}

#[test]
fn task_loss_gradient_two_levels() {
    check_backbone(DownsampleMode::ScatterMean, UpsampleMode::GatherResidual, 2, 7);
}

/// The batched surrogate gradient equals the explicit
/// `-(1/G) sum_i A_i grad log pi(b_i)` built from per-sample gradients.
#[test]
fn surrogate_gradient_matches_sum_form() {
    let mut r = rng(8);
    let policy = small_policy(8, PolicyMode::Contextual, 1, 8);
    let x = random_series(&mut r, 8);
    let rollouts = PolicyRollouts::sample(&policy, &[&x], 4, 0, &mut r).unwrap();
    let samples: Vec<BoundaryVector> = rollouts.samples()[0].iter().map(|(b, _)| b.clone()).collect();
    let rewards = vec![vec![0.3, -1.0, 2.0, 0.5]];
    let update = rollouts.finish(&policy, rewards, AdvantageMode::Standardize, 1e-8, 0.0).unwrap();
    let adv = &update.groups[0].advantages;

    let mut expected: Vec<Vec<f64>> = policy.params().values().iter().map(|m| vec![0.0; m.data().len()]).collect();
    for (b, a) in samples.iter().zip(adv) {
        let (_, g) = log_prob_and_grads(&policy, &x, b);
        for (e, gm) in expected.iter_mut().zip(&g) {
            for (ev, gv) in e.iter_mut().zip(gm.data()) {
                *ev -= a * gv / 4.0;
            }
        }
    }
    for (e, got) in expected.iter().zip(&update.grads) {
        for (a, b) in e.iter().zip(got.data()) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }
}
