//! The assembled network: encoder and stream heads, auxiliary heads, the
//! alignment pool and the reflective loop, with batch-level forward passes
//! for training and single-example inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentConfig, AlignmentNoise, AlignmentPool, IdentityState, RoutingDecision};
use crate::autograd::{Graph, Params, Var};
use crate::contrastive::{pooled_embedding, refine_tokens, window_loss, ContrastiveConfig};
use crate::corpus::{Example, MASK_TOKEN};
use crate::encoder::{span_infill_loss, style_classification_loss, AcsVars, Encoder, EncoderConfig, Heads, InfillHead, StyleHead};
use crate::error::{CalmError, Result};
use crate::nn::{fnv1a, ForwardCtx, ParamBuilder};
use crate::reflect::{
    calibrate_and_correct, cosine, identity_loss, IdentityReviser, InverseIdentityHead, PredictionRecord,
    PromptEmbedding, PromptGenerator, ReasonVars, Reasoner, ReflectConfig, ReflectiveTrace, Revision,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub contrastive: ContrastiveConfig,
    pub alignment: AlignmentConfig,
    pub reflect: ReflectConfig,
    pub num_cultures: usize,
    pub task_labels: usize,
    /// Probability that each marker of an anchor is masked for infilling.
    pub infill_mask_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            contrastive: ContrastiveConfig::default(),
            alignment: AlignmentConfig::default(),
            reflect: ReflectConfig::default(),
            num_cultures: 8,
            task_labels: 4,
            infill_mask_prob: 0.5,
        }
    }
}

impl ModelConfig {
    /// Small widths for single-core runs.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig {
                d_model: 64,
                d_ff: 128,
                head_hidden: 64,
                ..EncoderConfig::default()
            },
            alignment: AlignmentConfig {
                cluster_hidden: 64,
                d_align: 32,
                expert_layers: 2,
                expert_d_ff: 64,
                fusion_hidden: 64,
                d_calib: 32,
                ..AlignmentConfig::default()
            },
            reflect: ReflectConfig {
                prompt_d_ff: 128,
                reasoner_d_ff: 128,
                penultimate: 32,
                identity_hidden: 32,
                ..ReflectConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        for (name, v) in [
            ("vocab_size", e.vocab_size),
            ("d_model", e.d_model),
            ("heads", e.heads),
            ("layers", e.layers),
            ("d_ff", e.d_ff),
            ("max_len", e.max_len),
            ("head_hidden", e.head_hidden),
        ] {
            if v == 0 {
                return Err(CalmError::Config(format!("encoder.{name} must be positive")));
            }
        }
        if !e.d_model.is_multiple_of(e.heads) {
            return Err(CalmError::Config(format!(
                "encoder.heads {} does not divide d_model {}",
                e.heads, e.d_model
            )));
        }
        if !(0.0..1.0).contains(&e.dropout) {
            return Err(CalmError::Config("encoder.dropout must lie in [0, 1)".into()));
        }
        if e.vocab_size <= MASK_TOKEN {
            return Err(CalmError::Config("vocabulary too small for reserved tokens".into()));
        }
        self.contrastive.validate()?;
        self.alignment.validate()?;
        self.reflect.validate(e.d_model)?;
        if self.num_cultures < 2 {
            return Err(CalmError::Config("num_cultures must be >= 2".into()));
        }
        if self.task_labels < 1 {
            return Err(CalmError::Config("task_labels must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.infill_mask_prob) {
            return Err(CalmError::Config("infill_mask_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Which parts of the network a forward pass exercises.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Everything.
    #[default]
    Joint,
    /// Encoder, stream heads, auxiliary objectives and the contrastive
    /// window only.
    Contrastive,
}

/// Per-term values of the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub task: T,
    pub window: T,
    pub explicit_aux: T,
    pub latent_aux: T,
    pub balance: T,
    pub identity: T,
}

impl<T: Copy> LossTerms<T> {
    pub fn named(&self) -> [(&'static str, T); 6] {
        [
            ("task", self.task),
            ("window", self.window),
            ("explicit_aux", self.explicit_aux),
            ("latent_aux", self.latent_aux),
            ("balance", self.balance),
            ("identity", self.identity),
        ]
    }

    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> LossTerms<U> {
        LossTerms {
            task: f(self.task),
            window: f(self.window),
            explicit_aux: f(self.explicit_aux),
            latent_aux: f(self.latent_aux),
            balance: f(self.balance),
            identity: f(self.identity),
        }
    }
}

/// Settings of one batch forward pass.
#[derive(Clone, Debug)]
pub struct StepOptions {
    pub gumbel_temperature: f64,
    /// Root of all randomness in the pass (masks, noise, dropout).
    pub seed: u64,
    pub training: bool,
    pub stage: Stage,
    /// Fixed Gumbel noise for the anchors; sampled from `seed` if absent.
    pub noise: Option<AlignmentNoise>,
    /// Allow the reflective correction.
    pub reflect: bool,
}

impl StepOptions {
    pub fn eval(seed: u64, gumbel_temperature: f64) -> Self {
        Self {
            gumbel_temperature,
            seed,
            training: false,
            stage: Stage::Joint,
            noise: None,
            reflect: true,
        }
    }
}

/// Graph handles of one encoded input.
#[derive(Clone, Copy, Debug)]
pub struct StreamVars {
    pub acs: AcsVars,
    pub refined_explicit: Var,
    pub refined_latent: Var,
    pub pooled_explicit: Var,
    pub pooled_latent: Var,
}

/// Output of [`CalmModel::forward_batch`].
pub struct BatchForward {
    pub terms: LossTerms<Var>,
    pub window_explicit: Var,
    pub window_latent: Var,
    pub routings: Vec<RoutingDecision>,
    pub deltas: Vec<f64>,
    pub corrected: Vec<bool>,
    /// Final task predictions per anchor.
    pub predictions: Vec<usize>,
}

pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    seed ^ fnv1a(tag.as_bytes()).rotate_left(17)
}

#[derive(Clone, Debug)]
pub struct CalmModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub heads: Heads,
    pub infill: InfillHead,
    pub style: StyleHead,
    pub pool: AlignmentPool,
    pub prompt: PromptGenerator,
    pub reasoner: Reasoner,
    pub inverse: InverseIdentityHead,
}

impl CalmModel {
    /// Registers every parameter, initialized from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Self, Params)> {
        config.validate()?;
        let mut params = Params::new();
        let mut pb = ParamBuilder::new(&mut params, seed);
        let e = &config.encoder;
        let d = e.d_model;
        let model = Self {
            encoder: Encoder::new(&mut pb, e),
            heads: Heads::new(&mut pb, d, e.head_hidden, d),
            infill: InfillHead::new(&mut pb, d, e.vocab_size),
            style: StyleHead::new(&mut pb, d, config.num_cultures),
            pool: AlignmentPool::new(&mut pb, d, &config.alignment)?,
            prompt: PromptGenerator::new(&mut pb, 3 * d, d, &config.reflect),
            reasoner: Reasoner::new(&mut pb, d, e.max_len, config.task_labels, &config.reflect),
            inverse: InverseIdentityHead::new(
                &mut pb,
                config.reflect.penultimate,
                config.num_cultures,
                config.alignment.d_calib,
                &config.reflect,
            ),
            config: config.clone(),
        };
        Ok((model, params))
    }

    pub fn check_example(&self, ex: &Example) -> Result<()> {
        self.encoder.check_tokens(&ex.tokens)?;
        if ex.culture_id >= self.config.num_cultures {
            return Err(CalmError::Input(format!(
                "culture_id {} outside {} cultures",
                ex.culture_id, self.config.num_cultures
            )));
        }
        if ex.task_label >= self.config.task_labels {
            return Err(CalmError::Input(format!(
                "task_label {} outside {} labels",
                ex.task_label, self.config.task_labels
            )));
        }
        Ok(())
    }

    pub fn encode_streams(&self, g: &mut Graph, tokens: &[usize], ctx: &mut ForwardCtx) -> Result<StreamVars> {
        let h = self.encoder.forward(g, tokens, ctx)?;
        let acs = self.heads.forward(g, h, ctx);
        let refined_explicit = refine_tokens(g, acs.h_explicit);
        let refined_latent = refine_tokens(g, acs.h_latent);
        Ok(StreamVars {
            acs,
            pooled_explicit: pooled_embedding(g, refined_explicit),
            pooled_latent: pooled_embedding(g, refined_latent),
            refined_explicit,
            refined_latent,
        })
    }

    /// Whole-input embedding used for probing: pooled refined explicit and
    /// latent features side by side.
    pub fn embed(&self, params: &Params, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(params);
        let s = self.encode_streams(&mut g, tokens, &mut ForwardCtx::eval())?;
        Ok(g.value(s.pooled_explicit)
            .iter()
            .chain(g.value(s.pooled_latent).iter())
            .copied()
            .collect())
    }

    /// Anchor copy with a random subset of markers masked. At least one
    /// marker is masked and at least one stays visible, so single-marker
    /// examples are left intact; returns the tokens and the masked positions.
    pub fn mask_for_infill(&self, ex: &Example, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
        let mut tokens = ex.tokens.clone();
        let marks = &ex.explicit_marker_positions;
        if marks.len() < 2 {
            return (tokens, Vec::new());
        }
        let mut masked: Vec<usize> = marks
            .iter()
            .copied()
            .filter(|_| rng.random::<f64>() < self.config.infill_mask_prob)
            .collect();
        if masked.is_empty() {
            masked.push(marks[rng.random_range(0..marks.len())]);
        }
        if masked.len() == marks.len() {
            masked.remove(rng.random_range(0..masked.len()));
        }
        for &p in &masked {
            tokens[p] = MASK_TOKEN;
        }
        (tokens, masked)
    }

    fn prompt_and_reason(
        &self,
        g: &mut Graph,
        h_task: Var,
        h_self: Var,
        ctx: &mut ForwardCtx,
    ) -> (Var, ReasonVars) {
        let p = self.prompt.forward(g, h_task, h_self, ctx);
        let r = self.reasoner.forward(g, Some(p), h_task, ctx);
        (p, r)
    }

    /// One training-style pass over anchors `0..B` and positives. Builds
    /// every loss term on the graph; reflection corrects flagged anchors at
    /// most once before the task loss is taken.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        anchors: &[&Example],
        positives: &[&Example],
        opts: &StepOptions,
    ) -> Result<BatchForward> {
        let b = anchors.len();
        if b == 0 || positives.len() != b {
            return Err(CalmError::Contract("batch needs equal, non-empty anchor and positive lists".into()));
        }
        for ex in anchors.iter().chain(positives) {
            self.check_example(ex)?;
        }
        let mut mask_rng = ChaCha8Rng::seed_from_u64(sub_seed(opts.seed, "mask"));
        let mut ctx = if opts.training {
            ForwardCtx::train(self.config.encoder.dropout, sub_seed(opts.seed, "dropout"))
        } else {
            ForwardCtx::eval()
        };

        let mut anchor_streams = Vec::with_capacity(b);
        let mut infill_terms = Vec::new();
        let mut style_terms = Vec::with_capacity(b);
        for ex in anchors {
            let (tokens, masked) = if opts.training {
                self.mask_for_infill(ex, &mut mask_rng)
            } else {
                (ex.tokens.clone(), Vec::new())
            };
            let s = self.encode_streams(g, &tokens, &mut ctx)?;
            if !masked.is_empty() {
                let target = Example {
                    explicit_marker_positions: masked,
                    ..(*ex).clone()
                };
                let aux = span_infill_loss(g, &self.infill, &target, s.acs.h_explicit)?;
                if aux.active {
                    infill_terms.push(aux.loss);
                }
            }
            style_terms.push(style_classification_loss(g, &self.style, ex, s.acs.h_latent)?);
            anchor_streams.push(s);
        }
        let mut pooled_e: Vec<Var> = anchor_streams.iter().map(|s| s.pooled_explicit).collect();
        let mut pooled_l: Vec<Var> = anchor_streams.iter().map(|s| s.pooled_latent).collect();
        for ex in positives {
            let s = self.encode_streams(g, &ex.tokens, &mut ctx)?;
            pooled_e.push(s.pooled_explicit);
            pooled_l.push(s.pooled_latent);
        }
        let cultures: Vec<usize> = anchors.iter().chain(positives).map(|e| e.culture_id).collect();
        let window = window_loss(g, &pooled_e, &pooled_l, &cultures, self.config.contrastive.temperature)?;
        let explicit_aux = mean_of(g, &infill_terms);
        let latent_aux = mean_of(g, &style_terms);

        if opts.stage == Stage::Contrastive {
            let zero = g.scalar_const(0.0);
            return Ok(BatchForward {
                terms: LossTerms {
                    task: zero,
                    window: window.total,
                    explicit_aux,
                    latent_aux,
                    balance: zero,
                    identity: zero,
                },
                window_explicit: window.explicit,
                window_latent: window.latent,
                routings: Vec::new(),
                deltas: Vec::new(),
                corrected: Vec::new(),
                predictions: Vec::new(),
            });
        }

        let k = self.config.alignment.clusters;
        let lengths: Vec<usize> = anchors.iter().map(|e| e.tokens.len()).collect();
        let noise = match &opts.noise {
            Some(n) => n.clone(),
            None => AlignmentNoise::sample(
                &lengths,
                k,
                &mut ChaCha8Rng::seed_from_u64(sub_seed(opts.seed, "gumbel")),
            ),
        };
        let re: Vec<Var> = anchor_streams.iter().map(|s| s.refined_explicit).collect();
        let rl: Vec<Var> = anchor_streams.iter().map(|s| s.refined_latent).collect();
        let align = self.pool.forward(g, &re, &rl, &noise, opts.gumbel_temperature, &mut ctx)?;

        let mut logits = Vec::with_capacity(b);
        let mut id_terms = Vec::with_capacity(b);
        let mut deltas = Vec::with_capacity(b);
        for i in 0..b {
            let id = align.identities[i];
            let (_, r) = self.prompt_and_reason(g, anchor_streams[i].acs.h_task, id.h_self, &mut ctx);
            let inv = self.inverse.forward(g, r.penultimate, &mut ctx);
            id_terms.push(identity_loss(g, &self.inverse, &inv, id.calib, anchors[i].culture_id));
            let calib: Vec<f64> = g.value(id.calib).iter().copied().collect();
            let rev: Vec<f64> = g.value(inv.h_reverse).iter().copied().collect();
            deltas.push(cosine(&calib, &rev));
            logits.push(r.logits);
        }
        let cal = &self.config.reflect.calibration;
        let corrected: Vec<bool> = deltas.iter().map(|&d| opts.reflect && cal.needs_correction(d)).collect();
        if corrected.iter().any(|&c| c) {
            let fresh = AlignmentNoise::sample(
                &lengths,
                k,
                &mut ChaCha8Rng::seed_from_u64(sub_seed(opts.seed, "gumbel-reflect")),
            );
            let revised = self.pool.forward(
                g,
                &re,
                &rl,
                &fresh,
                self.config.alignment.gumbel.final_temperature(),
                &mut ctx,
            )?;
            for i in (0..b).filter(|&i| corrected[i]) {
                let (_, r) =
                    self.prompt_and_reason(g, anchor_streams[i].acs.h_task, revised.identities[i].h_self, &mut ctx);
                logits[i] = r.logits;
            }
        }
        let predictions = logits
            .iter()
            .map(|&l| crate::reflect::argmax(g.value(l).as_slice().expect("row")))
            .collect();
        let all = g.concat_rows(&logits);
        let targets: Vec<usize> = anchors.iter().map(|e| e.task_label).collect();
        let task = g.cross_entropy(all, &targets);
        let identity = mean_of(g, &id_terms);
        Ok(BatchForward {
            terms: LossTerms {
                task,
                window: window.total,
                explicit_aux,
                latent_aux,
                balance: align.balance_loss,
                identity,
            },
            window_explicit: window.explicit,
            window_latent: window.latent,
            routings: align.routings,
            deltas,
            corrected,
            predictions,
        })
    }

    /// Identity of `identity_tokens` (one-example batch through the pool).
    fn identity_of(
        &self,
        g: &mut Graph,
        streams: &StreamVars,
        noise_seed: u64,
        temperature: f64,
    ) -> Result<crate::alignment::IdentityVars> {
        let n = g.shape(streams.refined_explicit).0;
        let noise = AlignmentNoise::sample(
            &[n],
            self.config.alignment.clusters,
            &mut ChaCha8Rng::seed_from_u64(noise_seed),
        );
        let mut ctx = ForwardCtx::eval();
        let a = self.pool.forward(
            g,
            &[streams.refined_explicit],
            &[streams.refined_latent],
            &noise,
            temperature,
            &mut ctx,
        )?;
        Ok(a.identities[0])
    }

    /// Inference with reflection on one input.
    pub fn reflect(&self, params: &Params, tokens: &[usize], seed: u64) -> Result<ReflectiveTrace> {
        self.reflect_with_identity(params, tokens, tokens, seed)
    }

    /// Reflection where the identity comes from `identity_tokens` while the
    /// task stream comes from `task_tokens`.
    pub fn reflect_with_identity(
        &self,
        params: &Params,
        task_tokens: &[usize],
        identity_tokens: &[usize],
        seed: u64,
    ) -> Result<ReflectiveTrace> {
        let temperature = self.config.alignment.gumbel.final_temperature();
        let mut g = Graph::new(params);
        let mut ctx = ForwardCtx::eval();
        let task = self.encode_streams(&mut g, task_tokens, &mut ctx)?;
        let source = if identity_tokens == task_tokens {
            task
        } else {
            self.encode_streams(&mut g, identity_tokens, &mut ctx)?
        };
        let id = self.identity_of(&mut g, &source, sub_seed(seed, "gumbel"), temperature)?;
        let (p, r) = self.prompt_and_reason(&mut g, task.acs.h_task, id.h_self, &mut ctx);
        let inv = self.inverse.forward(&mut g, r.penultimate, &mut ctx);
        let identity = IdentityState::from_vars(&g, &id);
        let raw = PredictionRecord::from_vars(&g, &r);
        let h_reverse: Vec<f64> = g.value(inv.h_reverse).iter().copied().collect();
        let dist: Vec<f64> = g.value(inv.culture_probs).iter().copied().collect();
        let prompt = PromptEmbedding {
            vectors: g.value(p).clone(),
        };
        let mut reviser = GraphReviser {
            model: self,
            graph: &mut g,
            task,
            source,
            seed: sub_seed(seed, "gumbel-reflect"),
        };
        calibrate_and_correct(
            &identity,
            prompt,
            raw,
            h_reverse,
            dist,
            &self.config.reflect.calibration,
            &mut reviser,
        )
    }
}

struct GraphReviser<'m, 'g, 'p> {
    model: &'m CalmModel,
    graph: &'g mut Graph<'p>,
    task: StreamVars,
    source: StreamVars,
    seed: u64,
}

impl IdentityReviser for GraphReviser<'_, '_, '_> {
    fn revise(&mut self) -> Result<Revision> {
        let m = self.model;
        let g = &mut *self.graph;
        let id = m.identity_of(g, &self.source, self.seed, m.config.alignment.gumbel.final_temperature())?;
        let mut ctx = ForwardCtx::eval();
        let (p, r) = m.prompt_and_reason(g, self.task.acs.h_task, id.h_self, &mut ctx);
        let inv = m.inverse.forward(g, r.penultimate, &mut ctx);
        Ok(Revision {
            identity: IdentityState::from_vars(g, &id),
            prompt: PromptEmbedding {
                vectors: g.value(p).clone(),
            },
            output: PredictionRecord::from_vars(g, &r),
            h_reverse: g.value(inv.h_reverse).iter().copied().collect(),
        })
    }
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Var {
    if terms.is_empty() {
        return g.scalar_const(0.0);
    }
    let cat = g.concat_cols(terms);
    g.mean_all(cat)
}
