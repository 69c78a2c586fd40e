//! Patch-based forecasting backbone.
//!
//! Pipeline for one univariate window: per-window z-score, affine step
//! embedding, then for each hierarchy level an encoder, a downsample from
//! units to patches, and (at the innermost level) a latent transformer over
//! patches, followed by upsampling back to the finer resolution with a
//! residual and a decoder. The full-resolution embeddings are flattened and
//! mapped to the horizon by a linear head, then de-normalized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::graph::{Bound, Graph, Mask, ParamId, ParamStore, Var};
use crate::nn::{Attention, LayerNorm, Linear, TransformerBlock};
use crate::partition::{enforce_min_compression, nested_partitions, BoundaryVector, CompressionConfig, PatchPartition};
use crate::policy::mean_std;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleMode {
    ScatterMean,
    CrossAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    GatherResidual,
    CrossAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub d_latent: usize,
    pub latent_depth: usize,
    pub heads: usize,
    pub horizon: usize,
    pub lookback: usize,
    pub downsample: DownsampleMode,
    pub upsample: UpsampleMode,
    pub normalize: bool,
    /// Number of patching levels (1 = single compression stage).
    pub levels: usize,
    /// Transformer blocks before each downsample.
    pub encoder_depth: usize,
    /// Transformer blocks after each upsample.
    pub decoder_depth: usize,
    /// Learned positional embeddings on the patch sequence.
    pub latent_positional: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_latent: 64,
            latent_depth: 2,
            heads: 4,
            horizon: 96,
            lookback: 96,
            downsample: DownsampleMode::ScatterMean,
            upsample: UpsampleMode::GatherResidual,
            normalize: true,
            levels: 1,
            encoder_depth: 1,
            decoder_depth: 1,
            latent_positional: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads < 1 || self.d_model % self.heads != 0 || self.d_latent % self.heads != 0 {
            return Err(invalid_arg("backbone widths must be divisible by heads"));
        }
        if self.latent_depth < 1 {
            return Err(invalid_arg("latent_depth must be >= 1"));
        }
        if self.horizon < 1 || self.lookback < 1 {
            return Err(invalid_arg("horizon and lookback must be >= 1"));
        }
        if self.levels < 1 {
            return Err(invalid_arg("backbone levels must be >= 1"));
        }
        Ok(())
    }
}

/// One channel-independent unit of work: a look-back window and its target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastWindow {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub channel_id: usize,
    pub mean: f64,
    pub std: f64,
}

impl ForecastWindow {
    pub fn new(input: Vec<f64>, target: Vec<f64>, channel_id: usize) -> Result<Self> {
        if input.is_empty() || target.is_empty() {
            return Err(invalid_arg("window input and target must be non-empty"));
        }
        if input.iter().chain(&target).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite window value".into()));
        }
        let (mean, std) = mean_std(&input);
        Ok(Self {
            input,
            target,
            channel_id,
            mean,
            std,
        })
    }
}

#[derive(Clone, Debug)]
enum Down {
    Mean { lift: Linear },
    Cross { query: ParamId, attn: Attention },
}

#[derive(Clone, Debug)]
enum Up {
    Gather { proj: Linear },
    Cross { attn: Attention },
}

#[derive(Clone, Debug)]
struct Stage {
    encoder: Vec<TransformerBlock>,
    down: Down,
    up: Up,
    decoder: Vec<TransformerBlock>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamStore,
    embed: Linear,
    pos: ParamId,
    stages: Vec<Stage>,
    latent_pos: Option<ParamId>,
    latent: Vec<TransformerBlock>,
    norm: LayerNorm,
    head: Linear,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut params = ParamStore::new();
        let embed = Linear::new(&mut params, "backbone.embed", 1, c.d_model, true, rng);
        let pos = params.add("backbone.pos", Matrix::zeros(c.lookback, c.d_model));
        let mut stages = Vec::with_capacity(c.levels);
        for level in 0..c.levels {
            let fine = if level == 0 { c.d_model } else { c.d_latent };
            let name = format!("backbone.stage{level}");
            let encoder = (0..c.encoder_depth)
                .map(|i| TransformerBlock::new(&mut params, &format!("{name}.enc{i}"), fine, c.heads, rng))
                .collect();
            let down = match c.downsample {
                DownsampleMode::ScatterMean => Down::Mean {
                    lift: Linear::new(&mut params, &format!("{name}.down"), fine, c.d_latent, true, rng),
                },
                DownsampleMode::CrossAttention => Down::Cross {
                    query: params.add_normal(format!("{name}.down.query"), 1, fine, 0.02, rng),
                    attn: Attention::new(&mut params, &format!("{name}.down"), fine, fine, fine, c.d_latent, c.heads, rng),
                },
            };
            let up = match c.upsample {
                UpsampleMode::GatherResidual => Up::Gather {
                    proj: Linear::new(&mut params, &format!("{name}.up"), c.d_latent, fine, false, rng),
                },
                UpsampleMode::CrossAttention => Up::Cross {
                    attn: Attention::new(&mut params, &format!("{name}.up"), fine, c.d_latent, fine, fine, c.heads, rng),
                },
            };
            let decoder = (0..c.decoder_depth)
                .map(|i| TransformerBlock::new(&mut params, &format!("{name}.dec{i}"), fine, c.heads, rng))
                .collect();
            stages.push(Stage {
                encoder,
                down,
                up,
                decoder,
            });
        }
        let latent_pos = c
            .latent_positional
            .then(|| params.add_normal("backbone.latent_pos", c.lookback, c.d_latent, 0.02, rng));
        let latent = (0..c.latent_depth)
            .map(|i| TransformerBlock::new(&mut params, &format!("backbone.latent{i}"), c.d_latent, c.heads, rng))
            .collect();
        let norm = LayerNorm::new(&mut params, "backbone.norm", c.d_model);
        let head = Linear::new(&mut params, "backbone.head", c.lookback * c.d_model, c.horizon, true, rng);
        Ok(Self {
            config,
            params,
            embed,
            pos,
            stages,
            latent_pos,
            latent,
            norm,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Affine per-step lift: `x_t * w + bias + pos_t`.
    pub fn embed_steps_graph(&self, g: &mut Graph, p: &Bound, input: &[f64]) -> Var {
        let xv = g.leaf(Matrix::column(input));
        let h = self.embed.forward(g, p, xv);
        let rows: Vec<usize> = (0..input.len()).collect();
        let pos = g.gather_rows(p.var(self.pos), &rows);
        g.add(h, pos)
    }

    /// Units of stage `level` to patch embeddings `[num_patches, d_latent]`.
    pub fn downsample_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        level: usize,
        units: Var,
        partition: &PatchPartition,
    ) -> Var {
        match &self.stages[level].down {
            Down::Mean { lift } => {
                let pooled = g.segment_mean(units, partition.spans());
                lift.forward(g, p, pooled)
            }
            Down::Cross { query, attn } => {
                let k = partition.num_patches();
                let queries = g.gather_rows(p.var(*query), &vec![0; k]);
                let mask = Mask::spans(partition.spans(), partition.seq_len());
                attn.forward(g, p, queries, units, Some(&mask))
            }
        }
    }

    /// Latent transformer over the patch sequence (shape preserving).
    pub fn latent_encode_graph(&self, g: &mut Graph, p: &Bound, patches: Var) -> Var {
        let k = g.value(patches).rows();
        let mut h = match self.latent_pos {
            Some(pos) => {
                let rows: Vec<usize> = (0..k).collect();
                let pe = g.gather_rows(p.var(pos), &rows);
                g.add(patches, pe)
            }
            None => patches,
        };
        for block in &self.latent {
            h = block.forward(g, p, h, None);
        }
        h
    }

    /// Patch context back to unit resolution, added onto the residual `units`.
    pub fn upsample_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        level: usize,
        patch_ctx: Var,
        partition: &PatchPartition,
        units: Var,
    ) -> Var {
        let lifted = match &self.stages[level].up {
            Up::Gather { proj } => {
                let gathered = g.gather_rows(patch_ctx, &partition.patch_of());
                proj.forward(g, p, gathered)
            }
            Up::Cross { attn } => attn.forward(g, p, units, patch_ctx, None),
        };
        g.add(units, lifted)
    }

    fn stage_graph(&self, g: &mut Graph, p: &Bound, level: usize, units: Var, parts: &[PatchPartition]) -> Var {
        let stage = &self.stages[level];
        let mut h = units;
        for block in &stage.encoder {
            h = block.forward(g, p, h, None);
        }
        let z = self.downsample_graph(g, p, level, h, &parts[level]);
        let ctx = if level + 1 < self.stages.len() {
            self.stage_graph(g, p, level + 1, z, parts)
        } else {
            self.latent_encode_graph(g, p, z)
        };
        let mut h = self.upsample_graph(g, p, level, ctx, &parts[level], h);
        for block in &stage.decoder {
            h = block.forward(g, p, h, None);
        }
        h
    }

    /// Nested partitions the backbone will use for already-enforced boundaries.
    pub fn partitions_for(&self, b: &BoundaryVector) -> Result<Vec<PatchPartition>> {
        if b.len() != self.config.lookback {
            return Err(invalid_arg(format!(
                "boundary length {} does not match lookback {}",
                b.len(),
                self.config.lookback
            )));
        }
        if b.num_levels() < self.config.levels {
            return Err(invalid_arg(format!(
                "backbone needs {} boundary levels, got {}",
                self.config.levels,
                b.num_levels()
            )));
        }
        nested_partitions(b, self.config.levels)
    }

    /// De-normalized prediction `[1, horizon]` for given partitions.
    pub fn forecast_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        window: &ForecastWindow,
        parts: &[PatchPartition],
    ) -> Result<Var> {
        let c = &self.config;
        if window.input.len() != c.lookback {
            return Err(invalid_arg(format!(
                "window length {} does not match lookback {}",
                window.input.len(),
                c.lookback
            )));
        }
        let (mean, std) = if c.normalize { (window.mean, window.std) } else { (0.0, 1.0) };
        let x: Vec<f64> = window.input.iter().map(|v| (v - mean) / std).collect();
        let h = self.embed_steps_graph(g, p, &x);
        let h = self.stage_graph(g, p, 0, h, parts);
        let h = self.norm.forward(g, p, h);
        let flat = g.reshape(h, 1, c.lookback * c.d_model);
        let y = self.head.forward(g, p, flat);
        Ok(g.affine(y, std, mean))
    }

    /// Enforce the minimum compression, then predict the horizon.
    pub fn forecast(
        &self,
        window: &ForecastWindow,
        b: &BoundaryVector,
        compression: &CompressionConfig,
    ) -> Result<Vec<f64>> {
        let enforced = enforce_min_compression(b, compression);
        let parts = self.partitions_for(&enforced)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let y = self.forecast_graph(&mut g, &p, window, &parts)?;
        Ok(g.value(y).data().to_vec())
    }

    pub fn embed_steps(&self, input: &[f64]) -> Matrix {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let v = self.embed_steps_graph(&mut g, &p, input);
        g.value(v).clone()
    }

    pub fn downsample(&self, step_emb: &Matrix, partition: &PatchPartition) -> Matrix {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.leaf(step_emb.clone());
        let v = self.downsample_graph(&mut g, &p, 0, x, partition);
        g.value(v).clone()
    }

    pub fn latent_encode(&self, patch_emb: &Matrix) -> Matrix {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.leaf(patch_emb.clone());
        let v = self.latent_encode_graph(&mut g, &p, x);
        g.value(v).clone()
    }

    pub fn upsample(&self, patch_ctx: &Matrix, partition: &PatchPartition, step_emb: &Matrix) -> Matrix {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let z = g.leaf(patch_ctx.clone());
        let x = g.leaf(step_emb.clone());
        let v = self.upsample_graph(&mut g, &p, 0, z, partition, x);
        g.value(v).clone()
    }

    /// Lift weights/bias of the first downsample stage (scatter-mean mode).
    pub fn downsample_lift(&self) -> Option<(&Matrix, &Matrix)> {
        match &self.stages[0].down {
            Down::Mean { lift } => Some((
                self.params.get(lift.weight()),
                self.params.get(lift.bias().expect("lift has bias")),
            )),
            Down::Cross { .. } => None,
        }
    }

    /// Projection weights of the first upsample stage (gather mode).
    pub fn upsample_projection(&self) -> Option<&Matrix> {
        match &self.stages[0].up {
            Up::Gather { proj } => Some(self.params.get(proj.weight())),
            Up::Cross { .. } => None,
        }
    }
}

pub fn task_loss(prediction: &[f64], target: &[f64]) -> Result<f64> {
    if prediction.len() != target.len() || prediction.is_empty() {
        return Err(invalid_arg(format!(
            "prediction length {} does not match target length {}",
            prediction.len(),
            target.len()
        )));
    }
    Ok(prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / prediction.len() as f64)
}

pub fn reward(prediction: &[f64], target: &[f64]) -> Result<f64> {
    task_loss(prediction, target).map(|l| -l)
}

/// Mean squared error recorded on the graph.
pub fn task_loss_graph(g: &mut Graph, prediction: Var, target: &[f64]) -> Var {
    let t = g.leaf(Matrix::row_vector(target));
    let d = g.sub(prediction, t);
    let sq = g.mul(d, d);
    g.mean(sq)
}
