//! Boundary vectors, patch partitions and compression-rate enforcement.
//!
//! A boundary decision at step `t` closes a patch on the right of `x_t`.
//! Hierarchical decisions take values in `0..=L`: `b_t = l` closes a patch
//! at every level `1..=l`. Position `-1` is implicitly a boundary at every
//! level, and the trailing steps after the last boundary always form a final
//! patch (implicit closure), so every vector maps to a valid partition.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundaryVector {
    levels: Vec<usize>,
    num_levels: usize,
}

impl BoundaryVector {
    pub fn new(levels: Vec<usize>, num_levels: usize) -> Result<Self> {
        if num_levels < 1 {
            return Err(invalid_arg("num_levels must be >= 1"));
        }
        if levels.is_empty() {
            return Err(invalid_arg("boundary vector must cover at least one step"));
        }
        if let Some((t, &l)) = levels.iter().enumerate().find(|(_, &l)| l > num_levels) {
            return Err(invalid_arg(format!(
                "boundary level {l} at step {t} exceeds num_levels {num_levels}"
            )));
        }
        Ok(Self { levels, num_levels })
    }

    /// Single-level vector from 0/1 flags.
    pub fn binary(flags: &[u8]) -> Result<Self> {
        Self::new(flags.iter().map(|&f| f as usize).collect(), 1)
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Indices `t` with `b_t >= level`.
    pub fn boundary_indices(&self, level: usize) -> Vec<usize> {
        self.levels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l >= level)
            .map(|(t, _)| t)
            .collect()
    }
}

/// Ordered, contiguous, inclusive spans exactly covering `0..seq_len`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchPartition {
    spans: Vec<(usize, usize)>,
    seq_len: usize,
}

impl PatchPartition {
    pub fn new(spans: Vec<(usize, usize)>, seq_len: usize) -> Result<Self> {
        if seq_len == 0 || spans.is_empty() {
            return Err(invalid_arg("partition must cover at least one step"));
        }
        let mut next = 0;
        for &(s, e) in &spans {
            if s != next || e < s {
                return Err(invalid_arg(format!(
                    "span ({s}, {e}) breaks contiguity (expected start {next})"
                )));
            }
            next = e + 1;
        }
        if next != seq_len {
            return Err(invalid_arg(format!(
                "spans end at {} but seq_len is {seq_len}",
                next - 1
            )));
        }
        Ok(Self { spans, seq_len })
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn num_patches(&self) -> usize {
        self.spans.len()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.spans.iter().map(|(s, e)| e - s + 1).collect()
    }

    /// Patch index owning each step.
    pub fn patch_of(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.seq_len);
        for (j, &(s, e)) in self.spans.iter().enumerate() {
            out.extend(std::iter::repeat_n(j, e - s + 1));
        }
        out
    }
}

pub fn boundaries_to_partition(b: &BoundaryVector, level: usize) -> Result<PatchPartition> {
    if level < 1 || level > b.num_levels {
        return Err(invalid_arg(format!(
            "level {level} outside 1..={}",
            b.num_levels
        )));
    }
    let n = b.len();
    let mut spans = Vec::new();
    let mut start = 0;
    for (t, &l) in b.levels.iter().enumerate() {
        if l >= level || t + 1 == n {
            spans.push((start, t));
            start = t + 1;
        }
    }
    Ok(PatchPartition { spans, seq_len: n })
}

pub fn partition_to_boundaries(p: &PatchPartition) -> BoundaryVector {
    let mut levels = vec![0; p.seq_len];
    for &(_, e) in &p.spans {
        levels[e] = 1;
    }
    BoundaryVector {
        levels,
        num_levels: 1,
    }
}

/// Input points per patch.
pub fn compression_rate(p: &PatchPartition) -> f64 {
    p.seq_len as f64 / p.spans.len() as f64
}

/// Compression rate of a boundary vector at `level` (implicit closure applied).
pub fn boundary_compression_rate(b: &BoundaryVector, level: usize) -> f64 {
    let n = b.len();
    let closed = b.levels[..n - 1].iter().filter(|&&l| l >= level).count();
    n as f64 / (closed + 1) as f64
}

pub fn level_boundaries(b: &BoundaryVector, l: usize) -> Result<Vec<u8>> {
    if l < 1 || l > b.num_levels {
        return Err(invalid_arg(format!("level {l} outside 1..={}", b.num_levels)));
    }
    Ok(b.levels.iter().map(|&v| u8::from(v >= l)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    /// Hard minimum points-per-patch at level 1.
    pub min_rate: f64,
    /// Inference-time budget, if any.
    pub target_rate: Option<f64>,
    /// Minimum rates for levels `2..=L`; missing levels reuse the last rate.
    pub level_rates: Vec<f64>,
}

impl CompressionConfig {
    pub fn new(min_rate: f64) -> Result<Self> {
        let cfg = Self {
            min_rate,
            target_rate: None,
            level_rates: Vec::new(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_level_rates(mut self, rates: Vec<f64>) -> Result<Self> {
        self.level_rates = rates;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_rate > 1.0) || !self.min_rate.is_finite() {
            return Err(invalid_arg(format!("min_rate must be > 1, got {}", self.min_rate)));
        }
        if let Some(r) = self.target_rate {
            if !(r > 1.0) {
                return Err(invalid_arg(format!("target_rate must be > 1, got {r}")));
            }
        }
        let mut prev = self.min_rate;
        for &r in &self.level_rates {
            if !(r >= prev) {
                return Err(invalid_arg("per-level rates must be non-decreasing with level"));
            }
            prev = r;
        }
        Ok(())
    }

    pub fn rate_for_level(&self, level: usize) -> f64 {
        if level <= 1 {
            self.min_rate
        } else {
            self.level_rates
                .get(level - 2)
                .or(self.level_rates.last())
                .copied()
                .unwrap_or(self.min_rate)
        }
    }
}

/// Largest admissible patch count for `seq_len` points at `rate`.
pub fn max_patches(seq_len: usize, rate: f64) -> usize {
    ((seq_len as f64 / rate).floor() as usize).max(1)
}

/// Merge surplus patches on the right until every level meets its minimum
/// rate. Levels are processed coarsest first; boundaries merged away at
/// level `l` are demoted to `l - 1`, which keeps them at the finer levels.
pub fn enforce_min_compression(b: &BoundaryVector, cfg: &CompressionConfig) -> BoundaryVector {
    let mut levels = b.levels.clone();
    for level in (1..=b.num_levels).rev() {
        enforce_level(&mut levels, level, cfg.rate_for_level(level));
    }
    BoundaryVector {
        levels,
        num_levels: b.num_levels,
    }
}

fn enforce_level(levels: &mut [usize], level: usize, rate: f64) {
    let n = levels.len();
    let k_max = max_patches(n, rate);
    let interior = levels[..n - 1].iter().filter(|&&l| l >= level).count();
    if interior + 1 <= k_max {
        return;
    }
    let mut kept = 0;
    for l in levels[..n - 1].iter_mut() {
        if *l >= level {
            if kept < k_max - 1 {
                kept += 1;
            } else {
                *l = level - 1;
            }
        }
    }
    levels[n - 1] = levels[n - 1].max(level);
}

/// Partitions for a hierarchy: entry `l - 1` partitions the units of level
/// `l - 1` (raw steps for `l = 1`) into level-`l` patches.
pub fn nested_partitions(b: &BoundaryVector, depth: usize) -> Result<Vec<PatchPartition>> {
    if depth < 1 || depth > b.num_levels {
        return Err(invalid_arg(format!(
            "hierarchy depth {depth} outside 1..={}",
            b.num_levels
        )));
    }
    let mut out = Vec::with_capacity(depth);
    let first = boundaries_to_partition(b, 1)?;
    let mut ends: Vec<usize> = first.spans.iter().map(|&(_, e)| e).collect();
    out.push(first);
    for level in 2..=depth {
        let units = ends.len();
        let mut spans = Vec::new();
        let mut next_ends = Vec::new();
        let mut start = 0;
        for (j, &e) in ends.iter().enumerate() {
            if b.levels[e] >= level || j + 1 == units {
                spans.push((start, j));
                next_ends.push(e);
                start = j + 1;
            }
        }
        out.push(PatchPartition {
            spans,
            seq_len: units,
        });
        ends = next_ends;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bv(levels: &[usize], l: usize) -> BoundaryVector {
        BoundaryVector::new(levels.to_vec(), l).unwrap()
    }

    #[test]
    fn partition_from_worked_example() {
        let p = boundaries_to_partition(&bv(&[0, 0, 1, 0, 1, 1], 1), 1).unwrap();
        assert_eq!(p.spans(), &[(0, 2), (3, 4), (5, 5)]);
    }

    #[test]
    fn identity_segmentation() {
        let p = boundaries_to_partition(&bv(&[1; 5], 1), 1).unwrap();
        assert_eq!(p.spans(), &[(0, 0), (1, 1), (2, 2), (3, 3), (4, 4)]);
    }

    #[test]
    fn implicit_closure() {
        let p = boundaries_to_partition(&bv(&[1, 0, 0], 1), 1).unwrap();
        assert_eq!(p.spans(), &[(0, 0), (1, 2)]);
    }

    #[test]
    fn invalid_level_is_rejected() {
        let b = bv(&[1, 0], 1);
        assert!(boundaries_to_partition(&b, 0).is_err());
        assert!(boundaries_to_partition(&b, 2).is_err());
        assert!(level_boundaries(&b, 2).is_err());
        assert!(BoundaryVector::new(vec![0, 3], 2).is_err());
        assert!(BoundaryVector::new(vec![], 1).is_err());
    }

    #[test]
    fn single_step_always_one_patch() {
        for l in 0..=2 {
            let p = boundaries_to_partition(&bv(&[l], 2), 1).unwrap();
            assert_eq!(p.spans(), &[(0, 0)]);
        }
    }

    #[test]
    fn partition_back_to_boundaries() {
        let p = PatchPartition::new(vec![(0, 2), (3, 4), (5, 5)], 6).unwrap();
        assert_eq!(partition_to_boundaries(&p).levels(), &[0, 0, 1, 0, 1, 1]);
        let p = PatchPartition::new(vec![(0, 0)], 1).unwrap();
        assert_eq!(partition_to_boundaries(&p).levels(), &[1]);
        let p = PatchPartition::new(vec![(0, 7)], 8).unwrap();
        assert_eq!(partition_to_boundaries(&p).levels(), &[0, 0, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn partition_validation() {
        assert!(PatchPartition::new(vec![(0, 1), (3, 4)], 5).is_err());
        assert!(PatchPartition::new(vec![(0, 1), (2, 3)], 5).is_err());
        assert!(PatchPartition::new(vec![(1, 4)], 5).is_err());
    }

    #[test]
    fn rates() {
        let p = PatchPartition::new(vec![(0, 2), (3, 4), (5, 5)], 6).unwrap();
        assert_eq!(compression_rate(&p), 2.0);
        let p = boundaries_to_partition(&bv(&[1; 7], 1), 1).unwrap();
        assert_eq!(compression_rate(&p), 1.0);
        let p = PatchPartition::new(vec![(0, 7)], 8).unwrap();
        assert_eq!(compression_rate(&p), 8.0);
    }

    #[test]
    fn enforcement_examples() {
        let cfg = CompressionConfig::new(3.0).unwrap();
        let out = enforce_min_compression(&bv(&[0, 0, 1, 0, 1, 1], 1), &cfg);
        assert_eq!(out.levels(), &[0, 0, 1, 0, 0, 1]);
        assert_eq!(
            boundaries_to_partition(&out, 1).unwrap().spans(),
            &[(0, 2), (3, 5)]
        );

        let compliant = bv(&[0, 0, 1, 0, 0, 0], 1);
        assert_eq!(enforce_min_compression(&compliant, &cfg), compliant);

        let cfg = CompressionConfig::new(4.0).unwrap();
        let four = bv(&[0, 1, 0, 1, 0, 1, 0, 1], 1);
        let out = enforce_min_compression(&four, &cfg);
        assert_eq!(
            boundaries_to_partition(&out, 1).unwrap().spans(),
            &[(0, 1), (2, 7)]
        );
    }

    #[test]
    fn level_extraction_examples() {
        let b = bv(&[2, 0, 1, 2], 2);
        assert_eq!(level_boundaries(&b, 1).unwrap(), vec![1, 0, 1, 1]);
        assert_eq!(level_boundaries(&b, 2).unwrap(), vec![1, 0, 0, 1]);
        let b1 = bv(&[1, 0, 1], 1);
        assert_eq!(level_boundaries(&b1, 1).unwrap(), vec![1, 0, 1]);
        let z = bv(&[0; 4], 3);
        for l in 1..=3 {
            assert_eq!(level_boundaries(&z, l).unwrap(), vec![0; 4]);
        }
    }

    #[test]
    fn compression_config_validation() {
        assert!(CompressionConfig::new(1.0).is_err());
        assert!(CompressionConfig::new(2.0).unwrap().with_level_rates(vec![1.5]).is_err());
        let cfg = CompressionConfig::new(2.0).unwrap().with_level_rates(vec![4.0]).unwrap();
        assert_eq!(cfg.rate_for_level(1), 2.0);
        assert_eq!(cfg.rate_for_level(2), 4.0);
        assert_eq!(cfg.rate_for_level(3), 4.0);
    }

    #[test]
    fn hierarchical_enforcement_demotes() {
        // Level 2 allows 1 patch over 8 points; level 1 allows 4.
        let cfg = CompressionConfig::new(2.0).unwrap().with_level_rates(vec![8.0]).unwrap();
        let b = bv(&[2, 0, 2, 1, 0, 1, 0, 0], 2);
        let out = enforce_min_compression(&b, &cfg);
        assert_eq!(out.levels(), &[1, 0, 1, 1, 0, 0, 0, 2]);
        assert_eq!(boundary_compression_rate(&out, 2), 8.0);
        assert_eq!(boundary_compression_rate(&out, 1), 2.0);
    }

    #[test]
    fn nested_partition_levels() {
        let b = bv(&[0, 1, 0, 2, 1, 0, 0, 1], 2);
        let parts = nested_partitions(&b, 2).unwrap();
        assert_eq!(parts[0].spans(), &[(0, 1), (2, 3), (4, 4), (5, 7)]);
        assert_eq!(parts[1].spans(), &[(0, 1), (2, 3)]);
    }

    fn arb_levels(max_len: usize, max_level: usize) -> impl Strategy<Value = (Vec<usize>, usize)> {
        (1..=max_level).prop_flat_map(move |l| {
            (prop::collection::vec(0..=l, 1..=max_len), Just(l))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        #[test]
        fn coverage_and_roundtrip((levels, l) in arb_levels(64, 3)) {
            let b = BoundaryVector::new(levels, l).unwrap();
            for level in 1..=l {
                let p = boundaries_to_partition(&b, level).unwrap();
                prop_assert!(PatchPartition::new(p.spans().to_vec(), b.len()).is_ok());
                let back = partition_to_boundaries(&p);
                prop_assert_eq!(boundaries_to_partition(&back, 1).unwrap(), p);
            }
        }

        #[test]
        fn enforcement_properties((levels, _) in arb_levels(200, 1), rate in 1.5f64..16.0) {
            let b = BoundaryVector::new(levels, 1).unwrap();
            let cfg = CompressionConfig::new(rate).unwrap();
            let out = enforce_min_compression(&b, &cfg);
            let before = boundaries_to_partition(&b, 1).unwrap();
            let after = boundaries_to_partition(&out, 1).unwrap();
            prop_assert!(after.num_patches() <= before.num_patches());
            if b.len() as f64 >= rate {
                prop_assert!(compression_rate(&after) >= rate);
            }
            prop_assert_eq!(enforce_min_compression(&out, &cfg), out);
        }
    }
}
