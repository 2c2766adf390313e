//! Parameterised building blocks. Each layer owns only [`ParamId`]s; the
//! tensors live in a [`ParamStore`] and are bound per forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Gelu,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => g.tanh(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

/// `y = x·W + b`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        group: &str,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_normal(group, &format!("{name}.w"), &[d_in, d_out], gain / (d_in as f64).sqrt(), rng);
        let b = store.add(group, &format!("{name}.b"), Tensor::zeros(&[1, d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Result<Var> {
        let (rows, cols) = g.shape(x);
        if cols != self.d_in {
            return Err(Error::Shape(format!(
                "dense input [{rows}x{cols}] vs weight [{}x{}]",
                self.d_in, self.d_out
            )));
        }
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

/// Stack of affine layers, each followed by its own activation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<(Linear, Activation)>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; `acts` has one entry per layer.
    pub fn new(
        store: &mut ParamStore,
        group: &str,
        name: &str,
        dims: &[usize],
        acts: &[Activation],
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(dims.len(), acts.len() + 1);
        let layers = dims
            .windows(2)
            .zip(acts)
            .enumerate()
            .map(|(i, (w, &a))| (Linear::new(store, group, &format!("{name}.{i}"), w[0], w[1], 1.0, rng), a))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, store: &ParamStore, g: &mut Graph, mut x: Var) -> Result<Var> {
        for (lin, act) in &self.layers {
            x = lin.forward(store, g, x)?;
            x = act.apply(g, x);
        }
        Ok(x)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |(l, _)| l.d_out)
    }
}

/// Evaluates a dense stack on a plain tensor without recording gradients.
pub fn dense_forward(store: &ParamStore, mlp: &Mlp, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = mlp.forward(store, &mut g, xv)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, group: &str, name: &str, d: usize) -> Self {
        let gamma = store.add(group, &format!("{name}.gamma"), Tensor::full(&[1, d], 1.0));
        let beta = store.add(group, &format!("{name}.beta"), Tensor::zeros(&[1, d]));
        Self { gamma, beta }
    }

    pub fn forward(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub hidden_mult: usize,
    pub max_seq: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "transformer needs layers >= 1 and d_model divisible by heads, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    up: Linear,
    down: Linear,
}

/// Pre-norm causal transformer stack with a final layer norm.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CausalTransformer {
    pub cfg: TransformerConfig,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

impl CausalTransformer {
    pub fn new(store: &mut ParamStore, group: &str, cfg: TransformerConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let h = d * cfg.hidden_mult;
        let resid_gain = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("{group}.{i}");
                Block {
                    ln1: LayerNorm::new(store, group, &format!("{p}.ln1"), d),
                    q: Linear::new(store, group, &format!("{p}.q"), d, d, 1.0, rng),
                    k: Linear::new(store, group, &format!("{p}.k"), d, d, 1.0, rng),
                    v: Linear::new(store, group, &format!("{p}.v"), d, d, 1.0, rng),
                    o: Linear::new(store, group, &format!("{p}.o"), d, d, resid_gain, rng),
                    ln2: LayerNorm::new(store, group, &format!("{p}.ln2"), d),
                    up: Linear::new(store, group, &format!("{p}.up"), d, h, 1.0, rng),
                    down: Linear::new(store, group, &format!("{p}.down"), h, d, resid_gain, rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(store, group, &format!("{group}.ln_f"), d);
        Ok(Self { cfg, blocks, ln_f })
    }

    /// `tokens` is `[T, d]`; output row `t` depends on rows `0..=t` only.
    pub fn forward(&self, store: &ParamStore, g: &mut Graph, tokens: Var) -> Result<Var> {
        let (t, d) = g.shape(tokens);
        if t > self.cfg.max_seq {
            return Err(Error::Capacity { len: t, max: self.cfg.max_seq });
        }
        if d != self.cfg.d_model {
            return Err(Error::Shape(format!("trunk expects width {}, got {d}", self.cfg.d_model)));
        }
        let mut x = tokens;
        for b in &self.blocks {
            let h = b.ln1.forward(store, g, x)?;
            let q = b.q.forward(store, g, h)?;
            let k = b.k.forward(store, g, h)?;
            let v = b.v.forward(store, g, h)?;
            let a = g.attention(q, k, v, self.cfg.heads, true)?;
            let a = b.o.forward(store, g, a)?;
            x = g.add(x, a)?;
            let h = b.ln2.forward(store, g, x)?;
            let h = b.up.forward(store, g, h)?;
            let h = g.gelu(h);
            let h = b.down.forward(store, g, h)?;
            x = g.add(x, h)?;
        }
        self.ln_f.forward(store, g, x)
    }
}

/// Learned latent queries cross-attending to a variable number of inputs.
///
/// Output row `i` is `softmax(q_i·Kᵀ/√d) · V` with `q = latents·Wq`,
/// `K = x·Wk`, `V = x·Wv`. There is no positional term, so permuting the
/// input rows changes the result only through the attention weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerceiverResampler {
    pub latents: ParamId,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub n_latents: usize,
    pub d: usize,
}

impl PerceiverResampler {
    pub fn new(store: &mut ParamStore, group: &str, name: &str, d: usize, n_latents: usize, rng: &mut impl Rng) -> Self {
        let latents = store.add_normal(group, &format!("{name}.latents"), &[n_latents, d], 1.0, rng);
        Self {
            latents,
            q: Linear::new(store, group, &format!("{name}.q"), d, d, 1.0, rng),
            k: Linear::new(store, group, &format!("{name}.k"), d, d, 1.0, rng),
            v: Linear::new(store, group, &format!("{name}.v"), d, d, 1.0, rng),
            n_latents,
            d,
        }
    }

    /// `tokens` is `[V, d]`; returns `[M, d]`.
    pub fn forward(&self, store: &ParamStore, g: &mut Graph, tokens: Var) -> Result<Var> {
        let lat = g.param(store, self.latents);
        let q = self.q.forward(store, g, lat)?;
        let k = self.k.forward(store, g, tokens)?;
        let v = self.v.forward(store, g, tokens)?;
        g.attention(q, k, v, 1, false)
    }
}

/// Tensor-level entry point for the resampler.
pub fn perceiver_resample(store: &ParamStore, pr: &PerceiverResampler, patches: &[Vec<f64>]) -> Result<Tensor> {
    if patches.is_empty() {
        return Err(Error::Empty("perceiver resampler needs at least one input token".into()));
    }
    let data: Vec<f64> = patches.iter().flatten().copied().collect();
    let x = Tensor::new(vec![patches.len(), pr.d], data)?;
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let y = pr.forward(store, &mut g, xv)?;
    Ok(g.value(y).clone())
}
