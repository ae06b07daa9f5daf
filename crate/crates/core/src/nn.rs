//! Layers: linear, MLP, layer norm, multi-head self-attention, post-norm
//! transformer encoder, token embedding table and mean pooling.
//!
//! Layers own their parameters as plain [`Tensor`]s and bind them into a
//! [`Graph`] on every forward call.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Xorshift64Star;
use crate::tensor::Tensor;

/// Walks named parameters in a fixed order.
///
/// The order is part of the checkpoint format, so implementations must not
/// depend on anything but the layer structure.
pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform(±√(6/(fan_in+fan_out))) initialisation.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut Xorshift64Star) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_parts(vec![rows, cols], data)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut Xorshift64Star) -> Self {
        Self {
            weight: xavier_uniform(d_in, d_out, rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (_, d_out) = weight.dims2()?;
        if bias.shape() != [d_out] {
            return Err(Error::shape("linear", "bias length must equal output width"));
        }
        Ok(Self { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `x·W + b` for `x: n×d_in`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let h = g.matmul(x, w)?;
        g.add_row_bias(h, b)
    }
}

impl Parameterized for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "W"), &self.weight);
        f(&join(prefix, "b"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "W"), &mut self.weight);
        f(&join(prefix, "b"), &mut self.bias);
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l0: Linear,
    pub l1: Linear,
}

impl Mlp {
    pub fn new(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut Xorshift64Star) -> Self {
        Self {
            l0: Linear::new(d_in, d_hidden, rng),
            l1: Linear::new(d_hidden, d_out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.l0.forward(g, x)?;
        let h = g.relu(h)?;
        self.l1.forward(g, h)
    }
}

impl Parameterized for Mlp {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.l0.visit_params(&join(prefix, "l0"), f);
        self.l1.visit_params(&join(prefix, "l1"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.l0.visit_params_mut(&join(prefix, "l0"), f);
        self.l1.visit_params_mut(&join(prefix, "l1"), f);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::from_parts(vec![d], vec![1.0; d]),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

impl Parameterized for LayerNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Scaled dot-product self-attention over `n_heads` column groups.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub n_heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new(d_model: usize, n_heads: usize, rng: &mut Xorshift64Star) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        Ok(Self {
            n_heads,
            wq: Linear::new(d_model, d_model, rng),
            wk: Linear::new(d_model, d_model, rng),
            wv: Linear::new(d_model, d_model, rng),
            wo: Linear::new(d_model, d_model, rng),
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.d_in()
    }

    /// Attention weights of each head, `T×T` rows summing to one.
    pub fn attention_weights(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        Ok(self.heads(g, x)?.into_iter().map(|(w, _)| w).collect())
    }

    fn heads(&self, g: &mut Graph, x: Var) -> Result<Vec<(Var, Var)>> {
        let d = self.d_model();
        let (_, cols) = g.value(x).dims2()?;
        if cols != d {
            return Err(Error::shape("mha", format!("input width {cols} vs d_model {d}")));
        }
        let dh = d / self.n_heads;
        let q = self.wq.forward(g, x)?;
        let k = self.wk.forward(g, x)?;
        let v = self.wv.forward(g, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, s, e)?;
            let qh = g.scale(qh, scale)?;
            let kh = g.slice_cols(k, s, e)?;
            let vh = g.slice_cols(v, s, e)?;
            let scores = g.matmul_ex(qh, kh, true)?;
            let weights = g.softmax_rows(scores)?;
            let head = g.matmul(weights, vh)?;
            out.push((weights, head));
        }
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let heads: Vec<Var> = self.heads(g, x)?.into_iter().map(|(_, o)| o).collect();
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        self.wo.forward(g, cat)
    }
}

impl Parameterized for MultiHeadAttention {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (name, l) in [("Wq", &self.wq), ("Wk", &self.wk), ("Wv", &self.wv), ("Wo", &self.wo)] {
            f(&join(prefix, name), &l.weight);
            f(&join(prefix, &format!("{name}.b")), &l.bias);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (name, l) in [
            ("Wq", &mut self.wq),
            ("Wk", &mut self.wk),
            ("Wv", &mut self.wv),
            ("Wo", &mut self.wo),
        ] {
            f(&join(prefix, name), &mut l.weight);
            f(&join(prefix, &format!("{name}.b")), &mut l.bias);
        }
    }
}

/// Post-norm block: `h = LN(x + MHA(x))`, `out = LN(h + FF(h))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff: Mlp,
    pub ln2: LayerNorm,
}

impl EncoderBlock {
    pub fn new(d_model: usize, n_heads: usize, ff_dim: usize, rng: &mut Xorshift64Star) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(d_model, n_heads, rng)?,
            ln1: LayerNorm::new(d_model),
            ff: Mlp::new(d_model, ff_dim, d_model, rng),
            ln2: LayerNorm::new(d_model),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let a = self.attn.forward(g, x)?;
        let h = g.add(x, a)?;
        let h = self.ln1.forward(g, h)?;
        let f = self.ff.forward(g, h)?;
        let o = g.add(h, f)?;
        self.ln2.forward(g, o)
    }
}

impl Parameterized for EncoderBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.ln1.visit_params(&join(prefix, "ln1"), f);
        self.ff.visit_params(&join(prefix, "ff"), f);
        self.ln2.visit_params(&join(prefix, "ln2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.attn.visit_params_mut(&join(prefix, "attn"), f);
        self.ln1.visit_params_mut(&join(prefix, "ln1"), f);
        self.ff.visit_params_mut(&join(prefix, "ff"), f);
        self.ln2.visit_params_mut(&join(prefix, "ln2"), f);
    }
}

/// Fixed sinusoidal position table, `T×d`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![t, d], data)
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub d_model: usize,
    pub n_heads: usize,
    pub layers: Vec<EncoderBlock>,
    /// Add sinusoidal positions before the first block.
    pub positional_encoding: bool,
}

impl TransformerEncoder {
    pub fn new(
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        ff_dim: usize,
        rng: &mut Xorshift64Star,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|_| EncoderBlock::new(d_model, n_heads, ff_dim, rng))
            .collect::<Result<Vec<_>>>()?;
        if n_layers == 0 && (n_heads == 0 || !d_model.is_multiple_of(n_heads)) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        Ok(Self {
            d_model,
            n_heads,
            layers,
            positional_encoding: true,
        })
    }

    /// `T×d_model -> T×d_model`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (t, d) = g.value(x).dims2()?;
        if t == 0 {
            return Err(Error::Invalid("encoder input has no tokens".into()));
        }
        if d != self.d_model {
            return Err(Error::shape("encoder", format!("width {d} vs d_model {}", self.d_model)));
        }
        let mut h = x;
        if self.positional_encoding {
            let pe = g.constant(sinusoidal_positions(t, d));
            h = g.add(h, pe)?;
        }
        for layer in &self.layers {
            h = layer.forward(g, h)?;
        }
        Ok(h)
    }
}

impl Parameterized for TransformerEncoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_params(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

/// Token id → vector lookup.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub table: Tensor,
}

impl EmbeddingTable {
    pub fn new(vocab: usize, d_model: usize, rng: &mut Xorshift64Star) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::Config("vocabulary must be nonempty".into()));
        }
        Ok(Self {
            table: xavier_uniform(vocab, d_model, rng),
        })
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab()) {
            return Err(Error::Invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab()
            )));
        }
        let t = g.param(&self.table);
        g.gather_rows(t, ids)
    }
}

impl Parameterized for EmbeddingTable {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "table"), &self.table);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "table"), &mut self.table);
    }
}

/// Column-wise mean over the token axis.
pub fn mean_pool(g: &mut Graph, x: Var) -> Result<Var> {
    g.mean_rows(x)
}
