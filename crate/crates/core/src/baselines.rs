//! Comparison patchers that share the backbone: fixed-size, uniformly random
//! and local-variance patching.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::topk_boundaries;
use crate::error::{invalid_arg, Result};
use crate::partition::{boundaries_to_partition, max_patches, BoundaryVector, PatchPartition};

pub const DEFAULT_VARIANCE_WINDOW: usize = 8;

pub fn static_partition(seq_len: usize, patch_size: usize) -> Result<PatchPartition> {
    if patch_size < 1 {
        return Err(invalid_arg("patch_size must be >= 1"));
    }
    let spans = (0..seq_len)
        .step_by(patch_size)
        .map(|s| (s, (s + patch_size - 1).min(seq_len - 1)))
        .collect();
    PatchPartition::new(spans, seq_len)
}

/// `max(1, floor(seq_len / rate))` patches with uniformly random cuts.
pub fn random_partition<R: Rng + ?Sized>(seq_len: usize, rate: f64, rng: &mut R) -> Result<PatchPartition> {
    if !(rate > 1.0) {
        return Err(invalid_arg(format!("rate must be > 1, got {rate}")));
    }
    if seq_len == 0 {
        return Err(invalid_arg("seq_len must be >= 1"));
    }
    let k = max_patches(seq_len, rate);
    let mut cuts = index::sample(rng, seq_len - 1, k - 1).into_vec();
    cuts.sort_unstable();
    let mut flags = vec![0u8; seq_len];
    for c in cuts {
        flags[c] = 1;
    }
    flags[seq_len - 1] = 1;
    boundaries_to_partition(&BoundaryVector::binary(&flags)?, 1)
}

/// Trailing-window population standard deviation, truncated at the start.
pub fn rolling_std(x: &[f64], window: usize) -> Vec<f64> {
    (0..x.len())
        .map(|t| {
            let s = &x[(t + 1).saturating_sub(window)..=t];
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            (s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// Boundaries at the top-k rolling-std scores. The final step always
/// scores highest so the partition has exactly `k` patches.
pub fn variance_partition(x: &[f64], rate: f64, window: usize) -> Result<PatchPartition> {
    if window < 2 {
        return Err(invalid_arg("variance window must be >= 2"));
    }
    if x.is_empty() {
        return Err(invalid_arg("empty series"));
    }
    let mut scores = rolling_std(x, window);
    let last = scores.len() - 1;
    scores[last] = f64::INFINITY;
    let flags = topk_boundaries(&scores, rate)?;
    boundaries_to_partition(&BoundaryVector::binary(&flags)?, 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FixedPatcher {
    Static { patch_size: usize },
    Random { rate: f64 },
    Variance { rate: f64, window: usize },
}

impl FixedPatcher {
    pub fn name(&self) -> &'static str {
        match self {
            FixedPatcher::Static { .. } => "static",
            FixedPatcher::Random { .. } => "random",
            FixedPatcher::Variance { .. } => "variance",
        }
    }

    pub fn partition<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<PatchPartition> {
        match *self {
            FixedPatcher::Static { patch_size } => static_partition(x.len(), patch_size),
            FixedPatcher::Random { rate } => random_partition(x.len(), rate, rng),
            FixedPatcher::Variance { rate, window } => variance_partition(x, rate, window),
        }
    }
}
