//! Layers shared by the policy and the backbone, plus the AdamW optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, Mask, ParamId, ParamStore, Var};
use crate::tensor::Matrix;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_normal(format!("{name}.weight"), d_in, d_out, (1.0 / d_in as f64).sqrt(), rng);
        let b = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, d_out)));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = g.matmul(x, p.var(self.w));
        match self.b {
            Some(b) => g.add_row(h, p.var(b)),
            None => h,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, d, 1.0)),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, d)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

/// Multi-head attention; queries and keys/values may come from different sequences.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_query: usize,
        d_kv: usize,
        d_attn: usize,
        d_out: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads >= 1 && d_attn % heads == 0, "width must divide by heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_query, d_attn, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d_kv, d_attn, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d_kv, d_attn, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d_attn, d_out, true, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        queries: Var,
        context: Var,
        mask: Option<&Mask>,
    ) -> Var {
        let q = self.q.forward(g, p, queries);
        let k = self.k.forward(g, p, context);
        let v = self.v.forward(g, p, context);
        let width = g.value(q).cols();
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, s, e), g.slice_cols(k, s, e), g.slice_cols(v, s, e))
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores, mask);
            outs.push(g.matmul(weights, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, p, joined)
    }
}

/// Pre-norm transformer block: attention then a GELU MLP, both residual.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, d, d, d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, 2 * d, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), 2 * d, d, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, mask: Option<&Mask>) -> Var {
        let h = self.ln1.forward(g, p, x);
        let a = self.attn.forward(g, p, h, h, mask);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, p, x);
        let h = self.ff1.forward(g, p, h);
        let h = g.gelu(h);
        let h = self.ff2.forward(g, p, h);
        g.add(x, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .values()
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Matrix], &[Matrix]) {
        (&self.m, &self.v)
    }

    pub(crate) fn from_parts(config: AdamWConfig, m: Vec<Matrix>, v: Vec<Matrix>, t: u64) -> Self {
        Self { config, m, v, t }
    }

    /// Descend along `grads`. Frozen stores are rejected untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix]) -> Result<()> {
        if store.is_frozen() {
            return Err(Error::Frozen(
                "attempted gradient update on frozen parameters".into(),
            ));
        }
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer/gradient/parameter count mismatch: {} / {} / {}",
                self.m.len(),
                grads.len(),
                store.len()
            )));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (((p, g), m), v) in store
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.data().len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                let pi = &mut p.data_mut()[i];
                *pi -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *pi);
            }
        }
        Ok(())
    }
}
