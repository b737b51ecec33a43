//! Toy transformer encoder and the three projection heads that split its
//! output into task, explicit and latent streams, plus the two auxiliary
//! objectives that specialise the cultural streams.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Params, Var};
use crate::corpus::Example;
use crate::error::{CalmError, Result};
use crate::nn::{ForwardCtx, LayerNorm, Linear, Mlp, ParamBuilder, TransformerStack, INIT_STD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Hidden width of the projection heads.
    pub head_hidden: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1280,
            d_model: 128,
            heads: 4,
            layers: 2,
            d_ff: 256,
            max_len: 64,
            head_hidden: 64,
            dropout: 0.1,
        }
    }
}

/// Encoder output, `[seq_len × d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub values: Mat,
}

impl HiddenStates {
    pub fn seq_len(&self) -> usize {
        self.values.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.values.ncols()
    }
}

/// Task, explicit and latent streams, each `[seq_len × d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AcsRepresentation {
    pub h_task: Mat,
    pub h_explicit: Mat,
    pub h_latent: Mat,
}

impl AcsRepresentation {
    /// The three streams joined column-wise.
    pub fn concatenated(&self) -> Mat {
        ndarray::concatenate(
            ndarray::Axis(1),
            &[self.h_task.view(), self.h_explicit.view(), self.h_latent.view()],
        )
        .expect("streams share seq_len")
    }
}

/// Graph handles of the three streams.
#[derive(Clone, Copy, Debug)]
pub struct AcsVars {
    pub h_task: Var,
    pub h_explicit: Var,
    pub h_latent: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_emb: crate::autograd::ParamId,
    pub pos_emb: crate::autograd::ParamId,
    pub stack: TransformerStack,
    pub final_ln: LayerNorm,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder, config: &EncoderConfig) -> Self {
        let mut s = pb.scope("encoder");
        Self {
            token_emb: s.normal("token_emb", config.vocab_size, config.d_model, INIT_STD),
            pos_emb: s.normal("pos_emb", config.max_len, config.d_model, INIT_STD),
            stack: TransformerStack::new(
                &mut s,
                "stack",
                config.layers,
                config.d_model,
                config.heads,
                config.d_ff,
            ),
            final_ln: LayerNorm::new(&mut s, "final_ln", config.d_model),
            config: config.clone(),
        }
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(CalmError::Input("cannot encode an empty token sequence".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(CalmError::Input(format!(
                "sequence length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(CalmError::Input(format!(
                "token id {t} out of vocabulary (size {})",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token + learned position embeddings through the transformer stack.
    pub fn forward(&self, g: &mut Graph, tokens: &[usize], ctx: &mut ForwardCtx) -> Result<Var> {
        self.check_tokens(tokens)?;
        let emb = g.param(self.token_emb);
        let x = g.gather_rows(emb, tokens);
        let pos = g.param(self.pos_emb);
        let p = g.slice_rows(pos, 0, tokens.len());
        let x = g.add(x, p);
        let x = self.stack.forward(g, x, false, ctx);
        Ok(self.final_ln.forward(g, x))
    }

    pub fn encode(&self, params: &Params, tokens: &[usize]) -> Result<HiddenStates> {
        let mut g = Graph::new(params);
        let h = self.forward(&mut g, tokens, &mut ForwardCtx::eval())?;
        Ok(HiddenStates {
            values: g.value(h).clone(),
        })
    }
}

/// The three independent projection heads; all read the final encoder
/// layer.
#[derive(Clone, Debug)]
pub struct Heads {
    pub task: Mlp,
    pub explicit: Mlp,
    pub latent: Mlp,
}

impl Heads {
    pub fn new(pb: &mut ParamBuilder, d_model: usize, hidden: usize, d: usize) -> Self {
        let mut s = pb.scope("heads");
        Self {
            task: Mlp::new(&mut s, "task", d_model, hidden, d),
            explicit: Mlp::new(&mut s, "explicit", d_model, hidden, d),
            latent: Mlp::new(&mut s, "latent", d_model, hidden, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, h: Var, ctx: &mut ForwardCtx) -> AcsVars {
        AcsVars {
            h_task: self.task.forward(g, h, ctx),
            h_explicit: self.explicit.forward(g, h, ctx),
            h_latent: self.latent.forward(g, h, ctx),
        }
    }

    pub fn disentangle(&self, params: &Params, h: &HiddenStates) -> AcsRepresentation {
        let mut g = Graph::new(params);
        let x = g.constant(h.values.clone());
        let v = self.forward(&mut g, x, &mut ForwardCtx::eval());
        AcsRepresentation {
            h_task: g.value(v.h_task).clone(),
            h_explicit: g.value(v.h_explicit).clone(),
            h_latent: g.value(v.h_latent).clone(),
        }
    }
}

/// Auxiliary loss value with an activity flag.
#[derive(Clone, Copy, Debug)]
pub struct AuxLoss {
    pub loss: Var,
    pub active: bool,
}

/// Token classifier over `h_explicit` rows for masked-marker infilling.
#[derive(Clone, Debug)]
pub struct InfillHead {
    pub out: Linear,
}

impl InfillHead {
    pub fn new(pb: &mut ParamBuilder, d: usize, vocab_size: usize) -> Self {
        Self {
            out: Linear::new(&mut pb.scope("infill"), "out", d, vocab_size),
        }
    }

    pub fn logits(&self, g: &mut Graph, h_explicit: Var, positions: &[usize]) -> Var {
        let rows = g.gather_rows(h_explicit, positions);
        self.out.forward(g, rows)
    }
}

/// Cross-entropy of recovering the tokens at the example's marker positions
/// from `h_explicit`. The caller decides which input was encoded; training
/// feeds a copy with those positions replaced by the mask token.
pub fn span_infill_loss(
    g: &mut Graph,
    head: &InfillHead,
    example: &Example,
    h_explicit: Var,
) -> Result<AuxLoss> {
    let n = g.shape(h_explicit).0;
    if example.explicit_marker_positions.is_empty() {
        return Ok(AuxLoss {
            loss: g.scalar_const(0.0),
            active: false,
        });
    }
    let mut targets = Vec::with_capacity(example.explicit_marker_positions.len());
    for &p in &example.explicit_marker_positions {
        if p >= n || p >= example.tokens.len() {
            return Err(CalmError::Input(format!(
                "marker position {p} out of range for sequence of length {n}"
            )));
        }
        targets.push(example.tokens[p]);
    }
    let logits = head.logits(g, h_explicit, &example.explicit_marker_positions);
    Ok(AuxLoss {
        loss: g.cross_entropy(logits, &targets),
        active: true,
    })
}

/// Culture classifier over mean-pooled `h_latent`.
#[derive(Clone, Debug)]
pub struct StyleHead {
    pub out: Linear,
}

impl StyleHead {
    pub fn new(pb: &mut ParamBuilder, d: usize, num_cultures: usize) -> Self {
        Self {
            out: Linear::new(&mut pb.scope("style"), "out", d, num_cultures),
        }
    }

    pub fn logits(&self, g: &mut Graph, h_latent: Var) -> Var {
        let pooled = g.mean_rows(h_latent);
        self.out.forward(g, pooled)
    }
}

pub fn style_classification_loss(
    g: &mut Graph,
    head: &StyleHead,
    example: &Example,
    h_latent: Var,
) -> Result<Var> {
    let classes = g.params().get(head.out.w).ncols();
    if example.culture_id >= classes {
        return Err(CalmError::Input(format!(
            "culture_id {} outside {} classes",
            example.culture_id, classes
        )));
    }
    let logits = head.logits(g, h_latent);
    Ok(g.cross_entropy(logits, &[example.culture_id]))
}

/// Copy of `example` whose marker positions hold the mask token.
pub fn mask_markers(example: &Example) -> Vec<usize> {
    let mut tokens = example.tokens.clone();
    for &p in &example.explicit_marker_positions {
        tokens[p] = crate::corpus::MASK_TOKEN;
    }
    tokens
}
