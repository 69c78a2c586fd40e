//! Inference-time budget adaptation.
//!
//! Contextual windows pick the top-k boundary logits for a target rate (or
//! for the expected boundary count when no rate is given). Causal streams
//! threshold each new logit against a quantile of recent logits.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid_arg, Error, Result};
use crate::partition::max_patches;

/// Exactly `max(1, floor(T / rate))` ones at the largest logits, earliest
/// index first on ties.
pub fn topk_boundaries(logits: &[f64], rate: f64) -> Result<Vec<u8>> {
    if !(rate > 1.0) {
        return Err(invalid_arg(format!("target rate must be > 1, got {rate}")));
    }
    if logits.is_empty() {
        return Err(invalid_arg("no logits"));
    }
    Ok(topk_count(logits, max_patches(logits.len(), rate)))
}

pub(crate) fn topk_count(logits: &[f64], k: usize) -> Vec<u8> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    // Stable sort keeps the earlier index ahead among equal logits.
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    let mut out = vec![0u8; logits.len()];
    for &i in idx.iter().take(k.min(logits.len())) {
        out[i] = 1;
    }
    out
}

/// Expected number of boundaries, `sum_t sigmoid(l_t)`.
pub fn expected_k(logits: &[f64]) -> f64 {
    logits.iter().map(|&l| sigmoid(l)).sum()
}

/// Top-`max(1, floor(expected_k))` selection.
pub fn expected_k_boundaries(logits: &[f64]) -> Result<Vec<u8>> {
    if logits.is_empty() {
        return Err(invalid_arg("no logits"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidInput("non-finite logit".into()));
    }
    let k = (expected_k(logits).floor() as usize).max(1);
    Ok(topk_count(logits, k))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Linear-interpolation order statistic of an unsorted sample.
pub fn empirical_quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Threshold {
    /// Quantile of the last `capacity` logits.
    Window { capacity: usize, recent: VecDeque<f64> },
    /// Gaussian quantile of exponential moving mean/variance.
    Ema { alpha: f64, warmup: usize, mean: f64, var: f64, z: f64 },
}

/// Online boundary thresholding state for one causal stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamState {
    rate: f64,
    quantile: f64,
    seen: u64,
    threshold: Threshold,
}

impl StreamState {
    /// Sliding window of `window` logits; boundary iff the new logit exceeds
    /// the `1 - 1/rate` quantile of the previous `window` logits.
    pub fn new(rate: f64, window: usize) -> Result<Self> {
        validate_rate(rate)?;
        if window < 2 {
            return Err(invalid_arg("stream window must be >= 2"));
        }
        Ok(Self {
            rate,
            quantile: 1.0 - 1.0 / rate,
            seen: 0,
            threshold: Threshold::Window {
                capacity: window,
                recent: VecDeque::with_capacity(window),
            },
        })
    }

    /// Exponential moving mean/variance with smoothing `alpha`; the
    /// threshold is `mean + z * std`, `z` the standard normal quantile.
    pub fn with_ema(rate: f64, alpha: f64, warmup: usize) -> Result<Self> {
        validate_rate(rate)?;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid_arg("ema alpha must be in (0, 1)"));
        }
        if warmup < 2 {
            return Err(invalid_arg("ema warmup must be >= 2"));
        }
        let quantile = 1.0 - 1.0 / rate;
        let z = Normal::standard().inverse_cdf(quantile);
        Ok(Self {
            rate,
            quantile,
            seen: 0,
            threshold: Threshold::Ema {
                alpha,
                warmup,
                mean: 0.0,
                var: 0.0,
                z,
            },
        })
    }

    pub fn quantile(&self) -> f64 {
        self.quantile
    }

    pub fn steps_seen(&self) -> u64 {
        self.seen
    }

    fn warmup_len(&self) -> usize {
        match &self.threshold {
            Threshold::Window { capacity, .. } => *capacity,
            Threshold::Ema { warmup, .. } => *warmup,
        }
    }

    pub fn decide(&mut self, logit: f64) -> Result<u8> {
        if !logit.is_finite() {
            return Err(Error::InvalidInput("non-finite logit in stream".into()));
        }
        let warm = (self.seen as usize) < self.warmup_len();
        let boundary = if warm {
            let every = (self.rate.round() as u64).max(1);
            (self.seen + 1) % every == 0
        } else {
            match &self.threshold {
                Threshold::Window { recent, .. } => {
                    let buf: Vec<f64> = recent.iter().copied().collect();
                    logit > empirical_quantile(&buf, self.quantile)
                }
                Threshold::Ema { mean, var, z, .. } => logit > mean + z * var.sqrt(),
            }
        };
        match &mut self.threshold {
            Threshold::Window { capacity, recent } => {
                if recent.len() == *capacity {
                    recent.pop_front();
                }
                recent.push_back(logit);
            }
            Threshold::Ema { alpha, mean, var, .. } => {
                if self.seen == 0 {
                    *mean = logit;
                    *var = 0.0;
                } else {
                    let d = logit - *mean;
                    *mean += *alpha * d;
                    *var = (1.0 - *alpha) * (*var + *alpha * d * d);
                }
            }
        }
        self.seen += 1;
        Ok(u8::from(boundary))
    }
}

fn validate_rate(rate: f64) -> Result<()> {
    if !(rate > 1.0) || !rate.is_finite() {
        return Err(invalid_arg(format!("target rate must be > 1, got {rate}")));
    }
    Ok(())
}

/// Functional form of [`StreamState::decide`].
pub fn stream_decide(mut state: StreamState, logit: f64) -> Result<(u8, StreamState)> {
    let b = state.decide(logit)?;
    Ok((b, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn topk_examples() {
        let b = topk_boundaries(&[0.1, 0.9, 0.5, 0.9, 0.2], 2.5).unwrap();
        assert_eq!(b, vec![0, 1, 0, 1, 0]);
        let b = topk_boundaries(&[0.3; 5], 2.5).unwrap();
        assert_eq!(b, vec![1, 1, 0, 0, 0]);
        assert_eq!(topk_count(&[0.4, -0.1, 2.0], 3), vec![1, 1, 1]);
        assert!(topk_boundaries(&[1.0], 1.0).is_err());
        assert_eq!(topk_boundaries(&[1.0, 2.0], 100.0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn expected_k_examples() {
        assert!((expected_k(&[2.0, -2.0, 0.0]) - 1.5).abs() < 1e-15);
        assert_eq!(expected_k(&[0.0; 6]), 3.0);
        let ls = [0.3, -1.2, 4.0, -7.5, 0.01];
        let oracle: f64 = ls.iter().map(|l: &f64| 1.0 / (1.0 + (-l).exp())).sum();
        assert!((expected_k(&ls) - oracle).abs() < 1e-10);
        assert_eq!(expected_k_boundaries(&[2.0, -2.0, 0.0]).unwrap(), vec![1, 0, 0]);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(empirical_quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), 2.5);
        assert_eq!(empirical_quantile(&[1.0, 2.0], 1.0), 2.0);
        assert_eq!(empirical_quantile(&[5.0, 1.0, 3.0], 0.0), 1.0);
    }

    #[test]
    fn constant_stream_stops_after_warmup() {
        let mut s = StreamState::new(4.0, 8).unwrap();
        let out: Vec<u8> = (0..40).map(|_| s.decide(1.0).unwrap()).collect();
        assert_eq!(&out[..8], &[0, 0, 0, 1, 0, 0, 0, 1]);
        assert!(out[8..].iter().all(|&b| b == 0));
    }

    #[test]
    fn monotone_stream_places_boundaries_everywhere() {
        let mut s = StreamState::new(4.0, 16).unwrap();
        let out: Vec<u8> = (0..200).map(|i| s.decide(i as f64 * 0.01).unwrap()).collect();
        assert!(out[16..].iter().all(|&b| b == 1));
    }

    #[test]
    fn iid_stream_tracks_target_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = StreamState::new(4.0, 64).unwrap();
        let n = 10_000;
        let hits: u32 = (0..n).map(|_| s.decide(rng.random::<f64>()).unwrap() as u32).sum();
        let rate = hits as f64 / n as f64;
        assert!((0.1875..=0.3125).contains(&rate), "rate {rate}");
    }

    #[test]
    fn ema_stream_tracks_target_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut s = StreamState::with_ema(4.0, 0.02, 32).unwrap();
        let n = 10_000;
        let normal = rand_distr::StandardNormal;
        let hits: u32 = (0..n)
            .map(|_| s.decide(rng.sample::<f64, _>(normal)).unwrap() as u32)
            .sum();
        let rate = hits as f64 / n as f64;
        assert!((0.1875..=0.3125).contains(&rate), "rate {rate}");
    }

    #[test]
    fn stream_rejects_bad_input() {
        assert!(StreamState::new(1.0, 8).is_err());
        assert!(StreamState::new(4.0, 1).is_err());
        let s = StreamState::new(4.0, 8).unwrap();
        assert!(stream_decide(s, f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn topk_count_and_monotone_invariance(
            logits in prop::collection::vec(-5.0f64..5.0, 1..80),
            rate in 1.1f64..20.0,
        ) {
            let b = topk_boundaries(&logits, rate).unwrap();
            let k = ((logits.len() as f64 / rate).floor() as usize).max(1);
            prop_assert_eq!(b.iter().filter(|&&v| v == 1).count(), k);
            let transformed: Vec<f64> = logits.iter().map(|l| l * 4.0).collect();
            prop_assert_eq!(topk_boundaries(&transformed, rate).unwrap(), b);
        }

        #[test]
        fn expected_k_bounds(logits in prop::collection::vec(-30.0f64..30.0, 1..50), bump in 0.0f64..5.0, at in 0usize..50) {
            let k = expected_k(&logits);
            prop_assert!(k >= 0.0 && k <= logits.len() as f64);
            let mut up = logits.clone();
            let i = at % up.len();
            up[i] += bump;
            prop_assert!(expected_k(&up) >= k);
        }
    }
}
