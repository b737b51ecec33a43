//! Small neural building blocks on top of [`crate::autograd`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Mat, ParamId, Params, Var};

/// Standard deviation of the normal weight initializer; biases start at zero.
pub const INIT_STD: f64 = 0.02;

/// FNV-1a, used to derive per-parameter seeds from names.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Registers parameters under a name prefix, initializing each from a seed
/// derived from `(seed, full name)`. Two models built with the same seed
/// therefore share identical values for every parameter they have in
/// common, whatever else differs between them.
pub struct ParamBuilder<'a> {
    params: &'a mut Params,
    seed: u64,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(params: &'a mut Params, seed: u64) -> Self {
        Self {
            params,
            seed,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            params: self.params,
            seed: self.seed,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let full = self.full(name);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(full.as_bytes()));
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = Mat::from_shape_fn((rows, cols), |_| dist.sample(&mut rng));
        self.params.insert(full, value)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        let full = self.full(name);
        self.params.insert(full, Mat::from_elem((rows, cols), value))
    }
}

/// Per-pass settings: dropout and its randomness.
pub struct ForwardCtx {
    pub dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    /// Deterministic evaluation: no dropout.
    pub fn eval() -> Self {
        Self {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            dropout,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some() && self.dropout > 0.0
    }

    /// Inverted dropout.
    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Var {
        let p = self.dropout;
        let Some(rng) = self.rng.as_mut().filter(|_| p > 0.0) else {
            return x;
        };
        let keep = 1.0 - p;
        let mask = Mat::from_shape_fn(g.shape(x), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = g.constant(mask);
        g.mul(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = pb.scope(name);
        let w = s.normal("w", d_in, d_out, INIT_STD);
        let b = s.constant("b", 1, d_out, 0.0);
        Self { w, b: Some(b) }
    }

    pub fn without_bias(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = pb.scope(name);
        let w = s.normal("w", d_in, d_out, INIT_STD);
        Self { w, b: None }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            gamma: s.constant("gamma", 1, d, 1.0),
            beta: s.constant("beta", 1, d, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = g.layer_norm(x);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(y, gamma);
        g.add_row(y, beta)
    }
}

/// Two-layer perceptron with ReLU and dropout on the hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            l1: Linear::new(&mut s, "l1", d_in, hidden),
            l2: Linear::new(&mut s, "l2", hidden, d_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Var {
        let h = self.l1.forward(g, x);
        let h = g.relu(h);
        let h = ctx.dropout(g, h);
        self.l2.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value sources.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_head: usize,
}

/// Output of [`MultiHeadAttention::forward_with_weights`]: the attended
/// values and one attention matrix per head.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    /// `d_q` and `d_kv` are source widths; `d_model` must be divisible by
    /// `heads`.
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        d_q: usize,
        d_kv: usize,
        d_model: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && d_model.is_multiple_of(heads), "heads must divide d_model");
        let mut s = pb.scope(name);
        Self {
            wq: Linear::new(&mut s, "q", d_q, d_model),
            wk: Linear::new(&mut s, "k", d_kv, d_model),
            wv: Linear::new(&mut s, "v", d_kv, d_model),
            wo: Linear::new(&mut s, "o", d_model, d_model),
            heads,
            d_head: d_model / heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, causal: bool) -> Var {
        self.forward_with_weights(g, queries, keys, causal).out
    }

    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        queries: Var,
        keys: Var,
        causal: bool,
    ) -> AttentionOutput {
        let q = self.wq.forward(g, queries);
        let k = self.wk.forward(g, keys);
        let v = self.wv.forward(g, keys);
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * self.d_head;
            let qh = g.slice_cols(q, off, self.d_head);
            let kh = g.slice_cols(k, off, self.d_head);
            let vh = g.slice_cols(v, off, self.d_head);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let a = if causal {
                g.causal_softmax_rows(scores)
            } else {
                g.softmax_rows(scores)
            };
            weights.push(a);
            outs.push(g.matmul(a, vh));
        }
        let cat = g.concat_cols(&outs);
        AttentionOutput {
            out: self.wo.forward(g, cat),
            weights,
        }
    }
}

/// Pre-norm transformer layer: self-attention then feed-forward, each with
/// a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: Mlp,
}

impl TransformerLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize, heads: usize, d_ff: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            ln1: LayerNorm::new(&mut s, "ln1", d),
            attn: MultiHeadAttention::new(&mut s, "attn", d, d, d, heads),
            ln2: LayerNorm::new(&mut s, "ln2", d),
            ff: Mlp::new(&mut s, "ff", d, d_ff, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, causal: bool, ctx: &mut ForwardCtx) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, causal);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let f = self.ff.forward(g, h, ctx);
        g.add(x, f)
    }
}

/// A stack of transformer layers.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
}

impl TransformerStack {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        layers: usize,
        d: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        let mut s = pb.scope(name);
        Self {
            layers: (0..layers)
                .map(|i| TransformerLayer::new(&mut s, &format!("layer{i}"), d, heads, d_ff))
                .collect(),
        }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var, causal: bool, ctx: &mut ForwardCtx) -> Var {
        for layer in &self.layers {
            x = layer.forward(g, x, causal, ctx);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_seeds_by_name_not_order() {
        let mut a = Params::new();
        let mut b = Params::new();
        {
            let mut pa = ParamBuilder::new(&mut a, 9);
            pa.normal("x", 2, 2, 1.0);
            pa.normal("y", 2, 2, 1.0);
        }
        {
            let mut pb = ParamBuilder::new(&mut b, 9);
            pb.normal("y", 2, 2, 1.0);
        }
        assert_eq!(a.get(a.id("y").unwrap()), b.get(b.id("y").unwrap()));
    }

    #[test]
    fn attention_weights_are_row_stochastic() {
        let mut params = Params::new();
        let attn = {
            let mut pb = ParamBuilder::new(&mut params, 1);
            MultiHeadAttention::new(&mut pb, "a", 6, 4, 8, 2)
        };
        let mut g = Graph::new(&params);
        let q = g.constant(Mat::from_shape_fn((3, 6), |(i, j)| (i + j) as f64 * 0.1));
        let k = g.constant(Mat::from_shape_fn((5, 4), |(i, j)| (i * j) as f64 * 0.2));
        let out = attn.forward_with_weights(&mut g, q, k, false);
        assert_eq!(g.shape(out.out), (3, 8));
        for w in out.weights {
            for row in g.value(w).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eval_context_never_drops() {
        let params = Params::new();
        let mut g = Graph::new(&params);
        let x = g.constant(Mat::ones((4, 4)));
        let mut ctx = ForwardCtx::eval();
        let y = ctx.dropout(&mut g, x);
        assert_eq!(x, y);
    }
}
