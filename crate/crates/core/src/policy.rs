//! The patching policy: a lightweight transformer embedding each step,
//! followed by a linear head giving `L + 1` boundary-class logits per step.
//!
//! Steps are sampled independently given the logits, so the log-probability
//! of a whole boundary vector is the sum of per-step log-softmax values and
//! can be computed from a single forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::graph::{log_sum_exp, Bound, Graph, Mask, ParamStore, Var};
use crate::nn::{LayerNorm, Linear, TransformerBlock};
use crate::partition::BoundaryVector;
use crate::tensor::Matrix;

/// Floor applied to the per-window standard deviation when z-scoring.
pub const STD_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Whole window visible; input is z-scored per window.
    Contextual,
    /// Row `t` depends only on `x[0..=t]`; input is used as given.
    Causal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub d_patch: usize,
    pub depth: usize,
    pub heads: usize,
    pub num_levels: usize,
    pub mode: PolicyMode,
    pub context_limit: usize,
    /// Initialize the head so that the boundary probability starts at
    /// `1 / rate`. `None` starts from an unbiased head.
    pub init_boundary_rate: Option<f64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_patch: 64,
            depth: 2,
            heads: 4,
            num_levels: 1,
            mode: PolicyMode::Contextual,
            context_limit: 512,
            init_boundary_rate: None,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(invalid_arg("policy depth must be >= 1"));
        }
        if self.heads < 1 || self.d_patch % self.heads != 0 {
            return Err(invalid_arg("policy d_patch must be divisible by heads"));
        }
        if self.num_levels < 1 {
            return Err(invalid_arg("policy num_levels must be >= 1"));
        }
        if self.context_limit < 1 {
            return Err(invalid_arg("policy context_limit must be >= 1"));
        }
        if let Some(r) = self.init_boundary_rate {
            if !(r > 1.0) {
                return Err(invalid_arg("init_boundary_rate must be > 1"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PatchPolicy {
    config: PolicyConfig,
    params: ParamStore,
    input: Linear,
    pos: crate::graph::ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    head: Linear,
}

impl PatchPolicy {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_patch;
        let mut params = ParamStore::new();
        let input = Linear::new(&mut params, "policy.input", 1, d, true, rng);
        let pos = params.add_normal("policy.pos", config.context_limit, d, 0.02, rng);
        let blocks = (0..config.depth)
            .map(|i| TransformerBlock::new(&mut params, &format!("policy.block{i}"), d, config.heads, rng))
            .collect();
        let norm = LayerNorm::new(&mut params, "policy.norm", d);
        let head = Linear::new(&mut params, "policy.head", d, config.num_levels + 1, true, rng);
        if let Some(rate) = config.init_boundary_rate {
            // Class 0 carries log(rate - 1); each boundary class shares the rest.
            let b = params.get_mut(head.bias().expect("head has bias"));
            let prior = (rate - 1.0).ln() + (config.num_levels as f64).ln();
            b.set(0, 0, prior);
        }
        Ok(Self {
            config,
            params,
            input,
            pos,
            blocks,
            norm,
            head,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.set_frozen(frozen);
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_levels + 1
    }

    fn prepare_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.is_empty() {
            return Err(invalid_arg("policy input must be non-empty"));
        }
        if x.len() > self.config.context_limit {
            return Err(invalid_arg(format!(
                "sequence length {} exceeds context limit {}",
                x.len(),
                self.config.context_limit
            )));
        }
        if let Some(t) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite policy input at step {t}")));
        }
        Ok(match self.config.mode {
            PolicyMode::Contextual => {
                let (mean, std) = mean_std(x);
                x.iter().map(|v| (v - mean) / std).collect()
            }
            PolicyMode::Causal => x.to_vec(),
        })
    }

    /// Logits `[seq_len, L + 1]` recorded on `g`.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, x: &[f64]) -> Result<Var> {
        let input = self.prepare_input(x)?;
        let n = input.len();
        let xv = g.leaf(Matrix::column(&input));
        let h = self.input.forward(g, p, xv);
        let rows: Vec<usize> = (0..n).collect();
        let pos = g.gather_rows(p.var(self.pos), &rows);
        let mut h = g.add(h, pos);
        let mask = (self.config.mode == PolicyMode::Causal).then(|| Mask::causal(n));
        for block in &self.blocks {
            h = block.forward(g, p, h, mask.as_ref());
        }
        let h = self.norm.forward(g, p, h);
        Ok(self.head.forward(g, p, h))
    }

    pub fn forward(&self, x: &[f64]) -> Result<PolicyOutput> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let logits = self.forward_graph(&mut g, &p, x)?;
        let logits = g.value(logits).clone();
        if !logits.is_finite() {
            return Err(Error::NonFinite("policy logits".into()));
        }
        Ok(PolicyOutput { logits })
    }
}

pub(crate) fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(STD_FLOOR))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    logits: Matrix,
}

impl PolicyOutput {
    pub fn from_logits(logits: Matrix) -> Result<Self> {
        if logits.rows() == 0 || logits.cols() < 2 {
            return Err(invalid_arg("logits need >= 1 row and >= 2 classes"));
        }
        if !logits.is_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(Self { logits })
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn seq_len(&self) -> usize {
        self.logits.rows()
    }

    pub fn num_levels(&self) -> usize {
        self.logits.cols() - 1
    }

    fn log_softmax_rows(&self) -> Matrix {
        let mut out = self.logits.clone();
        for r in 0..out.rows() {
            let lse = log_sum_exp(self.logits.row(r));
            for v in out.row_mut(r) {
                *v -= lse;
            }
        }
        out
    }

    /// Class with the highest logit at each step (earliest class on ties).
    pub fn modal(&self) -> BoundaryVector {
        let levels = (0..self.seq_len())
            .map(|r| {
                let row = self.logits.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect();
        BoundaryVector::new(levels, self.num_levels()).expect("modal classes in range")
    }
}

fn sum_chosen(lsm: &Matrix, levels: &[usize]) -> f64 {
    levels.iter().enumerate().map(|(t, &c)| lsm.get(t, c)).sum()
}

/// Draw `group` independent boundary vectors with their log-probabilities.
pub fn sample_group<R: Rng + ?Sized>(
    out: &PolicyOutput,
    group: usize,
    rng: &mut R,
) -> Result<Vec<(BoundaryVector, f64)>> {
    if group < 2 {
        return Err(invalid_arg(format!("group size must be >= 2, got {group}")));
    }
    Ok(sample_n(out, group, rng))
}

pub(crate) fn sample_n<R: Rng + ?Sized>(
    out: &PolicyOutput,
    count: usize,
    rng: &mut R,
) -> Vec<(BoundaryVector, f64)> {
    let lsm = out.log_softmax_rows();
    let probs = lsm.map(f64::exp);
    let classes = out.logits.cols();
    (0..count)
        .map(|_| {
            let levels: Vec<usize> = (0..out.seq_len())
                .map(|t| {
                    let u: f64 = rng.random();
                    let row = probs.row(t);
                    let mut acc = 0.0;
                    let mut pick = None;
                    for (c, &p) in row.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            pick = Some(c);
                            break;
                        }
                    }
                    // Rounding left u above the running total: take the last live class.
                    pick.unwrap_or_else(|| {
                        (0..classes).rev().find(|&c| row[c] > 0.0).unwrap_or(0)
                    })
                })
                .collect();
            let lp = sum_chosen(&lsm, &levels);
            let b = BoundaryVector::new(levels, out.num_levels()).expect("sampled classes in range");
            (b, lp)
        })
        .collect()
}

pub fn log_prob(out: &PolicyOutput, b: &BoundaryVector) -> Result<f64> {
    if b.len() != out.seq_len() {
        return Err(invalid_arg(format!(
            "boundary length {} does not match logits length {}",
            b.len(),
            out.seq_len()
        )));
    }
    if b.num_levels() != out.num_levels() {
        return Err(invalid_arg("boundary levels do not match policy classes"));
    }
    Ok(sum_chosen(&out.log_softmax_rows(), b.levels()))
}

/// Summed per-step entropy of the categorical boundary distributions.
pub fn policy_entropy(out: &PolicyOutput) -> f64 {
    let lsm = out.log_softmax_rows();
    lsm.data()
        .iter()
        .map(|&lp| {
            let p = lp.exp();
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum()
}

/// Per-step log-odds that the step closes a patch at level `level` or coarser.
pub fn boundary_logit(out: &PolicyOutput, level: usize) -> Result<Vec<f64>> {
    if level < 1 || level > out.num_levels() {
        return Err(invalid_arg(format!(
            "level {level} outside 1..={}",
            out.num_levels()
        )));
    }
    Ok((0..out.seq_len())
        .map(|t| {
            let row = out.logits.row(t);
            log_sum_exp(&row[level..]) - log_sum_exp(&row[..level])
        })
        .collect())
}
