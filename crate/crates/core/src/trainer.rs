//! Joint training of the patching policy and the forecasting backbone with
//! group relative policy gradients.
//!
//! For every window the policy samples a group of boundary vectors. The
//! backbone, with the minimum compression rate enforced, is the environment:
//! each rollout's reward is its negative task loss. Advantages are computed
//! within the group, the policy takes one on-policy gradient step on the
//! surrogate `-(1/G) sum_i log_prob_i * A_i`, and the backbone takes one
//! step on the mean rollout loss.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{task_loss_graph, Backbone, ForecastWindow};
use crate::baselines::FixedPatcher;
use crate::error::{invalid_arg, Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::nn::{AdamW, AdamWConfig};
use crate::partition::{
    boundary_compression_rate, enforce_min_compression, partition_to_boundaries, BoundaryVector,
    CompressionConfig,
};
use crate::policy::{policy_entropy, sample_n, PatchPolicy, PolicyOutput};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// `(R - mean) / (std + eps)` with the population std.
    Standardize,
    /// `R - mean`.
    Center,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub group_size: usize,
    pub advantage_mode: AdvantageMode,
    pub eps: f64,
    pub lr_policy: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub entropy_coeff: f64,
    pub min_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            advantage_mode: AdvantageMode::Standardize,
            eps: 1e-8,
            lr_policy: 1e-3,
            lr_backbone: 1e-4,
            weight_decay: 1e-4,
            entropy_coeff: 0.0,
            min_rate: 8.0,
            batch_size: 32,
            epochs: 10,
            max_steps: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(invalid_arg("group_size must be >= 2"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid_arg("eps must be > 0"));
        }
        if !(self.lr_policy > 0.0) || !(self.lr_backbone > 0.0) {
            return Err(invalid_arg("learning rates must be > 0"));
        }
        if !(self.entropy_coeff >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid_arg("entropy_coeff and weight_decay must be >= 0"));
        }
        if !(self.min_rate > 1.0) {
            return Err(invalid_arg("min_rate must be > 1"));
        }
        if self.batch_size < 1 {
            return Err(invalid_arg("batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Level-1 minimum rate as an enforcement config.
    pub fn compression(&self) -> Result<CompressionConfig> {
        CompressionConfig::new(self.min_rate)
    }

    fn optimizer(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::with_lr(lr)
        }
    }
}

pub fn group_advantages(rewards: &[f64], mode: AdvantageMode, eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(invalid_arg("group statistics need at least 2 rewards"));
    }
    let (mean, std) = population_stats(rewards);
    Ok(match mode {
        AdvantageMode::Standardize => rewards.iter().map(|r| (r - mean) / (std + eps)).collect(),
        AdvantageMode::Center => rewards.iter().map(|r| r - mean).collect(),
    })
}

fn population_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `-(1/G) * sum_i log_prob_i * A_i`, advantages held constant.
pub fn grpg_surrogate(log_probs: &[f64], advantages: &[f64]) -> Result<f64> {
    if log_probs.len() != advantages.len() || log_probs.is_empty() {
        return Err(invalid_arg("log_probs and advantages must have equal non-zero length"));
    }
    let g = log_probs.len() as f64;
    Ok(-log_probs.iter().zip(advantages).map(|(l, a)| l * a).sum::<f64>() / g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub boundaries: Vec<BoundaryVector>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(
        samples: Vec<(BoundaryVector, f64)>,
        rewards: Vec<f64>,
        mode: AdvantageMode,
        eps: f64,
    ) -> Result<Self> {
        if samples.len() != rewards.len() {
            return Err(invalid_arg("one reward per rollout required"));
        }
        let advantages = group_advantages(&rewards, mode, eps)?;
        let (mean, std) = population_stats(&rewards);
        let (boundaries, log_probs) = samples.into_iter().unzip();
        Ok(Self {
            boundaries,
            log_probs,
            rewards,
            mean,
            std,
            advantages,
        })
    }

    pub fn size(&self) -> usize {
        self.rewards.len()
    }
}

/// First half of a policy-gradient step: one forward pass per window and a
/// group of on-policy samples, kept on a graph until rewards are known.
pub struct PolicyRollouts {
    graph: Graph,
    bound: Bound,
    logits: Vec<Var>,
    outputs: Vec<PolicyOutput>,
    samples: Vec<Vec<(BoundaryVector, f64)>>,
    sampled_at: u64,
}

/// Gradients and statistics from [`PolicyRollouts::finish`].
pub struct PolicyUpdate {
    pub loss: f64,
    pub entropy: f64,
    pub grads: Vec<Matrix>,
    pub groups: Vec<RolloutGroup>,
    pub sampled_at: u64,
}

impl PolicyRollouts {
    /// `version` tags the parameters the rollouts were drawn from.
    pub fn sample<R: Rng + ?Sized>(
        policy: &PatchPolicy,
        inputs: &[&[f64]],
        group: usize,
        version: u64,
        rng: &mut R,
    ) -> Result<Self> {
        if group < 2 {
            return Err(invalid_arg("group size must be >= 2"));
        }
        let mut graph = Graph::new();
        let bound = policy.params().bind(&mut graph);
        let mut logits = Vec::with_capacity(inputs.len());
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut samples = Vec::with_capacity(inputs.len());
        for x in inputs {
            let l = policy.forward_graph(&mut graph, &bound, x)?;
            let out = PolicyOutput::from_logits(graph.value(l).clone())?;
            samples.push(sample_n(&out, group, rng));
            logits.push(l);
            outputs.push(out);
        }
        Ok(Self {
            graph,
            bound,
            logits,
            outputs,
            samples,
            sampled_at: version,
        })
    }

    pub fn samples(&self) -> &[Vec<(BoundaryVector, f64)>] {
        &self.samples
    }

    pub fn outputs(&self) -> &[PolicyOutput] {
        &self.outputs
    }

    /// Build the batch-averaged surrogate (minus the entropy bonus) and
    /// differentiate it. `rewards[w][i]` belongs to sample `i` of window `w`.
    pub fn finish(
        mut self,
        policy: &PatchPolicy,
        rewards: Vec<Vec<f64>>,
        mode: AdvantageMode,
        eps: f64,
        entropy_coeff: f64,
    ) -> Result<PolicyUpdate> {
        if rewards.len() != self.samples.len() {
            return Err(invalid_arg("one reward group per window required"));
        }
        let g = &mut self.graph;
        let batch = self.samples.len() as f64;
        let mut terms = Vec::with_capacity(self.samples.len());
        let mut groups = Vec::with_capacity(self.samples.len());
        let mut entropy = 0.0;
        for ((samples, rw), (&logits, out)) in self
            .samples
            .drain(..)
            .zip(rewards)
            .zip(self.logits.iter().zip(&self.outputs))
        {
            let group = RolloutGroup::new(samples, rw, mode, eps)?;
            let lsm = g.log_softmax(logits);
            let size = group.size() as f64;
            for (b, a) in group.boundaries.iter().zip(&group.advantages) {
                if *a == 0.0 {
                    continue;
                }
                let picked = g.pick(lsm, b.levels());
                let lp = g.sum(picked);
                terms.push(g.scale(lp, -a / (size * batch)));
            }
            if entropy_coeff > 0.0 {
                let p = g.exp(lsm);
                let plogp = g.mul(p, lsm);
                let s = g.sum(plogp);
                // -beta * H = beta * sum p log p
                terms.push(g.scale(s, entropy_coeff / batch));
            }
            entropy += policy_entropy(out);
            groups.push(group);
        }
        let grads = if terms.is_empty() {
            policy
                .params()
                .values()
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect()
        } else {
            let total = g.add_n(&terms);
            g.backward(total).for_params(&self.bound, policy.params())
        };
        let mut loss = 0.0;
        for grp in &groups {
            loss += grpg_surrogate(&grp.log_probs, &grp.advantages)? / batch;
        }
        let entropy = entropy / batch;
        loss -= entropy_coeff * entropy;
        Ok(PolicyUpdate {
            loss,
            entropy,
            grads,
            groups,
            sampled_at: self.sampled_at,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub policy_loss: f64,
    pub backbone_loss: f64,
    pub mean_reward: f64,
    /// Mean compression rate after enforcement.
    pub realized_compression: f64,
    /// Mean compression rate of the proposals before enforcement.
    pub raw_compression: f64,
    pub entropy: f64,
    /// Step counter of the parameters the rollouts were sampled from.
    pub rollout_step: u64,
}

pub fn write_metrics_csv<W: Write>(out: W, history: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "step",
        "policy_loss",
        "backbone_loss",
        "mean_reward",
        "realized_compression",
        "entropy",
    ])?;
    for m in history {
        w.write_record([
            m.step.to_string(),
            m.policy_loss.to_string(),
            m.backbone_loss.to_string(),
            m.mean_reward.to_string(),
            m.realized_compression.to_string(),
            m.entropy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Owns both models, their optimizers and the sampling stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub policy: PatchPolicy,
    pub backbone: Backbone,
    pub config: TrainConfig,
    pub compression: CompressionConfig,
    /// `None` trains the learned policy; otherwise the backbone is trained
    /// under a fixed baseline patcher and the policy is left alone.
    pub patcher: Option<FixedPatcher>,
    pub(crate) policy_opt: AdamW,
    pub(crate) backbone_opt: AdamW,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) step: u64,
    pub(crate) epoch: usize,
    pub(crate) skipped: Vec<(u64, String)>,
}

impl Trainer {
    pub fn new(
        policy: PatchPolicy,
        backbone: Backbone,
        config: TrainConfig,
        compression: CompressionConfig,
    ) -> Result<Self> {
        config.validate()?;
        compression.validate()?;
        let (pc, bc) = (policy.config(), backbone.config());
        if pc.num_levels != bc.levels {
            return Err(invalid_arg(format!(
                "policy emits {} levels but the backbone has {}",
                pc.num_levels, bc.levels
            )));
        }
        if pc.context_limit < bc.lookback {
            return Err(invalid_arg(format!(
                "policy context {} is shorter than lookback {}",
                pc.context_limit, bc.lookback
            )));
        }
        let policy_opt = AdamW::new(config.optimizer(config.lr_policy), policy.params());
        let backbone_opt = AdamW::new(config.optimizer(config.lr_backbone), backbone.params());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            policy,
            backbone,
            config,
            compression,
            patcher: None,
            policy_opt,
            backbone_opt,
            rng,
            step: 0,
            epoch: 0,
            skipped: Vec::new(),
        })
    }

    pub fn with_patcher(mut self, patcher: FixedPatcher) -> Self {
        self.patcher = Some(patcher);
        self
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Steps aborted on non-finite losses, with their diagnostics.
    pub fn skipped(&self) -> &[(u64, String)] {
        &self.skipped
    }

    pub fn train_step(&mut self, batch: &[ForecastWindow]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(invalid_arg("empty batch"));
        }
        match self.patcher.clone() {
            None => self.learned_step(batch),
            Some(p) => self.fixed_step(batch, &p),
        }
    }

    fn learned_step(&mut self, batch: &[ForecastWindow]) -> Result<StepMetrics> {
        let inputs: Vec<&[f64]> = batch.iter().map(|w| w.input.as_slice()).collect();
        let group = self.config.group_size;
        let rollouts = PolicyRollouts::sample(&self.policy, &inputs, group, self.step, &mut self.rng)?;

        let mut g = Graph::new();
        let p = self.backbone.params().bind(&mut g);
        let mut losses = Vec::with_capacity(batch.len() * group);
        let mut rewards = Vec::with_capacity(batch.len());
        let mut realized = 0.0;
        let mut raw = 0.0;
        for (window, samples) in batch.iter().zip(rollouts.samples()) {
            let mut rw = Vec::with_capacity(group);
            for (b, _) in samples {
                raw += boundary_compression_rate(b, 1);
                let enforced = enforce_min_compression(b, &self.compression);
                realized += boundary_compression_rate(&enforced, 1);
                let parts = self.backbone.partitions_for(&enforced)?;
                let pred = self.backbone.forecast_graph(&mut g, &p, window, &parts)?;
                let loss = task_loss_graph(&mut g, pred, &window.target);
                let l = g.scalar(loss);
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "backbone loss {l} at step {} (channel {})",
                        self.step, window.channel_id
                    )));
                }
                rw.push(-l);
                losses.push(loss);
            }
            rewards.push(rw);
        }
        let n = losses.len() as f64;
        let sum = g.add_n(&losses);
        let total = g.scale(sum, 1.0 / n);
        let backbone_loss = g.scalar(total);

        let update = rollouts.finish(
            &self.policy,
            rewards,
            self.config.advantage_mode,
            self.config.eps,
            self.config.entropy_coeff,
        )?;
        debug_assert_eq!(update.sampled_at, self.step, "rollouts reused across steps");

        if !self.backbone.params().is_frozen() {
            let grads = g.backward(total).for_params(&p, self.backbone.params());
            self.backbone_opt.step(self.backbone.params_mut(), &grads)?;
        }
        if !self.policy.is_frozen() {
            self.policy_opt.step(self.policy.params_mut(), &update.grads)?;
        }

        let metrics = StepMetrics {
            step: self.step,
            policy_loss: update.loss,
            backbone_loss,
            mean_reward: -backbone_loss,
            realized_compression: realized / n,
            raw_compression: raw / n,
            entropy: update.entropy,
            rollout_step: update.sampled_at,
        };
        self.step += 1;
        Ok(metrics)
    }

    fn fixed_step(&mut self, batch: &[ForecastWindow], patcher: &FixedPatcher) -> Result<StepMetrics> {
        let mut g = Graph::new();
        let p = self.backbone.params().bind(&mut g);
        let mut losses = Vec::with_capacity(batch.len());
        let mut realized = 0.0;
        let mut raw = 0.0;
        for window in batch {
            let part = patcher.partition(&window.input, &mut self.rng)?;
            let b = partition_to_boundaries(&part);
            raw += boundary_compression_rate(&b, 1);
            let enforced = enforce_min_compression(&b, &self.compression);
            realized += boundary_compression_rate(&enforced, 1);
            let parts = self.backbone.partitions_for(&lift_levels(&enforced, self.backbone.config().levels))?;
            let pred = self.backbone.forecast_graph(&mut g, &p, window, &parts)?;
            let loss = task_loss_graph(&mut g, pred, &window.target);
            if !g.scalar(loss).is_finite() {
                return Err(Error::NonFinite(format!("backbone loss at step {}", self.step)));
            }
            losses.push(loss);
        }
        let n = losses.len() as f64;
        let sum = g.add_n(&losses);
        let total = g.scale(sum, 1.0 / n);
        let backbone_loss = g.scalar(total);
        if !self.backbone.params().is_frozen() {
            let grads = g.backward(total).for_params(&p, self.backbone.params());
            self.backbone_opt.step(self.backbone.params_mut(), &grads)?;
        }
        let metrics = StepMetrics {
            step: self.step,
            policy_loss: 0.0,
            backbone_loss,
            mean_reward: -backbone_loss,
            realized_compression: realized / n,
            raw_compression: raw / n,
            entropy: 0.0,
            rollout_step: self.step,
        };
        self.step += 1;
        Ok(metrics)
    }

    fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let seed = self
            .config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(epoch as u64 + 1);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    /// Run the remaining epochs, resuming mid-epoch from [`Trainer::step`]
    /// when a previous call stopped at `max_steps`. Resuming assumes the same
    /// window set. `on_epoch` runs after every completed epoch, e.g. to
    /// checkpoint.
    pub fn train(
        &mut self,
        windows: &[ForecastWindow],
        mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<Vec<StepMetrics>> {
        if windows.is_empty() {
            return Err(invalid_arg("dataset is empty"));
        }
        let mut history = Vec::new();
        let limit = self.config.max_steps as u64;
        let per_epoch = windows.len().div_ceil(self.config.batch_size);
        while self.epoch < self.config.epochs {
            let order = self.epoch_order(windows.len(), self.epoch);
            let done = (self.step as usize).saturating_sub(self.epoch * per_epoch).min(per_epoch);
            for chunk in order.chunks(self.config.batch_size).skip(done) {
                if limit > 0 && self.step >= limit {
                    return Ok(history);
                }
                let batch: Vec<ForecastWindow> = chunk.iter().map(|&i| windows[i].clone()).collect();
                match self.train_step(&batch) {
                    Ok(m) => history.push(m),
                    Err(Error::NonFinite(msg)) => {
                        self.skipped.push((self.step, msg));
                        self.step += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            self.epoch += 1;
            on_epoch(self)?;
        }
        Ok(history)
    }
}

/// Promote single-level boundaries so every one of them closes a patch at
/// all `depth` levels (fixed patchers have no hierarchy of their own).
pub(crate) fn lift_levels(b: &BoundaryVector, depth: usize) -> BoundaryVector {
    if depth <= b.num_levels() {
        return b.clone();
    }
    let levels = b.levels().iter().map(|&l| if l >= 1 { depth } else { 0 }).collect();
    BoundaryVector::new(levels, depth).expect("levels within depth")
}
