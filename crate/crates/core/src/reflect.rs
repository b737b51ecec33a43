//! Reflective reasoning: a self-prompt from task and identity features, a
//! prompt-conditioned classifier, an inverse head that guesses the identity
//! behind a prediction, and a threshold-gated single correction.

use serde::{Deserialize, Serialize};

use crate::alignment::IdentityState;
use crate::autograd::{Graph, Mat, Params, Var};
use crate::error::{CalmError, Result};
use crate::nn::{ForwardCtx, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamBuilder, TransformerStack, INIT_STD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub threshold: f64,
    pub max_cycles: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            max_cycles: 1,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(CalmError::Config(format!(
                "calibration threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.max_cycles != 1 {
            return Err(CalmError::Config("max_cycles must be 1".into()));
        }
        Ok(())
    }

    pub fn needs_correction(&self, delta: f64) -> bool {
        delta < self.threshold
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflectConfig {
    pub prompt_len: usize,
    pub prompt_layers: usize,
    pub prompt_heads: usize,
    pub prompt_d_ff: usize,
    pub reasoner_heads: usize,
    pub reasoner_d_ff: usize,
    pub penultimate: usize,
    pub identity_hidden: usize,
    pub calibration: CalibrationConfig,
}

impl Default for ReflectConfig {
    fn default() -> Self {
        Self {
            prompt_len: 4,
            prompt_layers: 2,
            prompt_heads: 4,
            prompt_d_ff: 256,
            reasoner_heads: 4,
            reasoner_d_ff: 256,
            penultimate: 64,
            identity_hidden: 64,
            calibration: CalibrationConfig::default(),
        }
    }
}

impl ReflectConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        self.calibration.validate()?;
        for (name, v) in [
            ("prompt_len", self.prompt_len),
            ("prompt_layers", self.prompt_layers),
            ("prompt_heads", self.prompt_heads),
            ("prompt_d_ff", self.prompt_d_ff),
            ("reasoner_heads", self.reasoner_heads),
            ("reasoner_d_ff", self.reasoner_d_ff),
            ("penultimate", self.penultimate),
            ("identity_hidden", self.identity_hidden),
        ] {
            if v == 0 {
                return Err(CalmError::Config(format!("reflect.{name} must be positive")));
            }
        }
        for (name, h) in [("prompt_heads", self.prompt_heads), ("reasoner_heads", self.reasoner_heads)] {
            if !d_model.is_multiple_of(h) {
                return Err(CalmError::Config(format!("reflect.{name} {h} does not divide d_model {d_model}")));
            }
        }
        Ok(())
    }
}

/// Virtual prompt, `[L_p × d_model]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    pub vectors: Mat,
}

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

/// Task logits, their argmax and the representation the inverse head reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub logits: Vec<f64>,
    pub label: usize,
    pub penultimate: Vec<f64>,
}

impl PredictionRecord {
    pub fn from_vars(g: &Graph, v: &ReasonVars) -> Self {
        let logits: Vec<f64> = g.value(v.logits).iter().copied().collect();
        Self {
            label: argmax(&logits),
            logits,
            penultimate: g.value(v.penultimate).iter().copied().collect(),
        }
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Graph cosine of two `1 × n` rows.
pub fn cosine_graph(g: &mut Graph, a: Var, b: Var) -> Var {
    let na = g.normalize_rows(a);
    let nb = g.normalize_rows(b);
    let p = g.mul(na, nb);
    g.sum_all(p)
}

/// `f_prompt`: pooled `(h_task ⊕ h_self)` → `L_p` rows through a small
/// causal decoder.
#[derive(Clone, Debug)]
pub struct PromptGenerator {
    pub prompt_len: usize,
    pub d_model: usize,
    pub input: Linear,
    pub decoder: TransformerStack,
    pub final_ln: LayerNorm,
}

impl PromptGenerator {
    pub fn new(pb: &mut ParamBuilder, d_in: usize, d_model: usize, c: &ReflectConfig) -> Self {
        let mut s = pb.scope("prompt");
        Self {
            prompt_len: c.prompt_len,
            d_model,
            input: Linear::new(&mut s, "input", d_in, c.prompt_len * d_model),
            decoder: TransformerStack::new(&mut s, "decoder", c.prompt_layers, d_model, c.prompt_heads, c.prompt_d_ff),
            final_ln: LayerNorm::new(&mut s, "final_ln", d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph, h_task: Var, h_self: Var, ctx: &mut ForwardCtx) -> Var {
        let t = g.mean_rows(h_task);
        let s = g.mean_rows(h_self);
        let x = g.concat_cols(&[t, s]);
        let x = self.input.forward(g, x);
        let x = g.reshape(x, self.prompt_len, self.d_model);
        let x = self.decoder.forward(g, x, true, ctx);
        self.final_ln.forward(g, x)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ReasonVars {
    /// `1 × labels`.
    pub logits: Var,
    /// `1 × penultimate`.
    pub penultimate: Var,
}

/// Prompt-conditioned classifier over the task stream. Token rows sit at
/// positions `L_p..` whether or not a prompt is given. They attend to each
/// other and, through a separate softmax, to the prompt rows; the prompt
/// branch has no bias terms, so an all-zero prompt contributes nothing.
#[derive(Clone, Debug)]
pub struct Reasoner {
    pub prompt_len: usize,
    pub pos_emb: crate::autograd::ParamId,
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub prompt_q: Linear,
    pub prompt_k: Linear,
    pub prompt_v: Linear,
    pub ln2: LayerNorm,
    pub ff: Mlp,
    pub penultimate: Linear,
    pub out: Linear,
}

impl Reasoner {
    pub fn new(
        pb: &mut ParamBuilder,
        d_model: usize,
        max_len: usize,
        labels: usize,
        c: &ReflectConfig,
    ) -> Self {
        let mut s = pb.scope("reasoner");
        Self {
            prompt_len: c.prompt_len,
            pos_emb: s.normal("pos_emb", max_len + c.prompt_len, d_model, INIT_STD),
            ln1: LayerNorm::new(&mut s, "ln1", d_model),
            self_attn: MultiHeadAttention::new(&mut s, "self_attn", d_model, d_model, d_model, c.reasoner_heads),
            prompt_q: Linear::new(&mut s, "prompt_q", d_model, d_model),
            prompt_k: Linear::without_bias(&mut s, "prompt_k", d_model, d_model),
            prompt_v: Linear::without_bias(&mut s, "prompt_v", d_model, d_model),
            ln2: LayerNorm::new(&mut s, "ln2", d_model),
            ff: Mlp::new(&mut s, "ff", d_model, c.reasoner_d_ff, d_model),
            penultimate: Linear::new(&mut s, "penultimate", d_model, c.penultimate),
            out: Linear::new(&mut s, "out", c.penultimate, labels),
        }
    }

    pub fn forward(&self, g: &mut Graph, prompt: Option<Var>, h_task: Var, ctx: &mut ForwardCtx) -> ReasonVars {
        let (n, d) = g.shape(h_task);
        let pos = g.param(self.pos_emb);
        let pos = g.slice_rows(pos, self.prompt_len, n);
        let x = g.add(h_task, pos);
        let h = self.ln1.forward(g, x);
        let a = self.self_attn.forward(g, h, h, false);
        let mut x = g.add(x, a);
        if let Some(p) = prompt {
            let q = self.prompt_q.forward(g, h);
            let k = self.prompt_k.forward(g, p);
            let v = self.prompt_v.forward(g, p);
            let s = g.matmul_t(q, k);
            let s = g.scale(s, 1.0 / (d as f64).sqrt());
            let w = g.softmax_rows(s);
            let pa = g.matmul(w, v);
            x = g.add(x, pa);
        }
        let h = self.ln2.forward(g, x);
        let f = self.ff.forward(g, h, ctx);
        let x = g.add(x, f);
        let m = g.mean_rows(x);
        let u = self.penultimate.forward(g, m);
        let u = g.relu(u);
        let logits = self.out.forward(g, u);
        ReasonVars {
            logits,
            penultimate: u,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct InverseVars {
    /// `1 × cultures`.
    pub culture_logits: Var,
    pub culture_probs: Var,
    /// `1 × d_calib`.
    pub h_reverse: Var,
}

/// `f_identity`: penultimate representation → culture distribution and its
/// calibration-space embedding.
#[derive(Clone, Debug)]
pub struct InverseIdentityHead {
    pub classifier: Mlp,
    pub embed: Linear,
}

impl InverseIdentityHead {
    pub fn new(pb: &mut ParamBuilder, d_in: usize, cultures: usize, d_calib: usize, c: &ReflectConfig) -> Self {
        let mut s = pb.scope("inverse");
        Self {
            classifier: Mlp::new(&mut s, "classifier", d_in, c.identity_hidden, cultures),
            embed: Linear::without_bias(&mut s, "embed", cultures, d_calib),
        }
    }

    pub fn forward(&self, g: &mut Graph, penultimate: Var, ctx: &mut ForwardCtx) -> InverseVars {
        let culture_logits = self.classifier.forward(g, penultimate, ctx);
        let culture_probs = g.softmax_rows(culture_logits);
        let h_reverse = self.embed.forward(g, culture_probs);
        InverseVars {
            culture_logits,
            culture_probs,
            h_reverse,
        }
    }

    pub fn infer(&self, params: &Params, raw: &PredictionRecord) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new(params);
        let u = g.constant(Mat::from_shape_vec((1, raw.penultimate.len()), raw.penultimate.clone()).expect("row"));
        let v = self.forward(&mut g, u, &mut ForwardCtx::eval());
        (
            g.value(v.h_reverse).iter().copied().collect(),
            g.value(v.culture_probs).iter().copied().collect(),
        )
    }
}

/// Temperature of the prototype classification over `calib`.
pub const PROTOTYPE_TEMPERATURE: f64 = 0.1;

/// `CE(culture) + CE_proto(calib) + (1 − cos(calib, h_reverse))`.
///
/// The rows of the bias-free `embed` weight act as culture prototypes;
/// `CE_proto` classifies `calib` by its cosine to each prototype, so `calib`
/// and `h_reverse` only agree when they point at the same culture.
pub fn identity_loss(g: &mut Graph, head: &InverseIdentityHead, inv: &InverseVars, calib: Var, culture: usize) -> Var {
    let ce = g.cross_entropy(inv.culture_logits, &[culture]);
    let protos = g.param(head.embed.w);
    let protos = g.normalize_rows(protos);
    let nc = g.normalize_rows(calib);
    let sims = g.matmul_t(nc, protos);
    let sims = g.scale(sims, 1.0 / PROTOTYPE_TEMPERATURE);
    let proto = g.cross_entropy(sims, &[culture]);
    let c = cosine_graph(g, calib, inv.h_reverse);
    let one_minus = g.scale(c, -1.0);
    let one = g.scalar_const(1.0);
    let one_minus = g.add(one, one_minus);
    let t = g.add(ce, proto);
    g.add(t, one_minus)
}

/// A revised identity with the prompt and prediction it leads to.
#[derive(Clone, Debug, PartialEq)]
pub struct Revision {
    pub identity: IdentityState,
    pub prompt: PromptEmbedding,
    pub output: PredictionRecord,
    pub h_reverse: Vec<f64>,
}

/// Handle through which a correction re-runs the alignment pool and the
/// downstream prompt and reasoner.
pub trait IdentityReviser {
    fn revise(&mut self) -> Result<Revision>;
}

/// Outcome of one reflective pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReflectiveTrace {
    pub prompt: PromptEmbedding,
    pub raw_output: PredictionRecord,
    pub h_reverse: Vec<f64>,
    pub culture_distribution: Vec<f64>,
    pub delta: f64,
    pub corrected: bool,
    pub final_output: PredictionRecord,
    /// δ of the revised identity; informational, never acted on.
    pub revised_delta: Option<f64>,
    pub revised_prompt: Option<PromptEmbedding>,
}

impl ReflectiveTrace {
    pub fn corrections(&self) -> usize {
        usize::from(self.corrected)
    }
}

/// Accepts the raw output when `δ ≥ threshold`; otherwise asks `reviser`
/// for exactly one revision and takes its output.
pub fn calibrate_and_correct(
    identity: &IdentityState,
    prompt: PromptEmbedding,
    raw_output: PredictionRecord,
    h_reverse: Vec<f64>,
    culture_distribution: Vec<f64>,
    config: &CalibrationConfig,
    reviser: &mut dyn IdentityReviser,
) -> Result<ReflectiveTrace> {
    config.validate()?;
    let delta = cosine(&identity.calib, &h_reverse);
    if !delta.is_finite() {
        return Err(CalmError::NonFinite {
            term: "delta".into(),
            step: 0,
        });
    }
    if !config.needs_correction(delta) {
        return Ok(ReflectiveTrace {
            final_output: raw_output.clone(),
            prompt,
            raw_output,
            h_reverse,
            culture_distribution,
            delta,
            corrected: false,
            revised_delta: None,
            revised_prompt: None,
        });
    }
    let rev = reviser.revise()?;
    Ok(ReflectiveTrace {
        prompt,
        raw_output,
        h_reverse,
        culture_distribution,
        delta,
        corrected: true,
        revised_delta: Some(cosine(&rev.identity.calib, &rev.h_reverse)),
        revised_prompt: Some(rev.prompt),
        final_output: rev.output,
    })
}
