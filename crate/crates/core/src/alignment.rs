//! Identity alignment pool: Gumbel-softmax token clustering per channel,
//! latent-to-explicit cluster cross-attention, three dimension-specific
//! expert-choice mixtures, and residual fusion into `h_self`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows_value, Graph, Mat, Params, Var};
use crate::contrastive::Channel;
use crate::error::{CalmError, Result};
use crate::nn::{ForwardCtx, Linear, Mlp, MultiHeadAttention, ParamBuilder, TransformerStack};

/// Guard for empty clusters in centroid normalization.
pub const MASS_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Contextuality,
    Interpersonality,
    Normativity,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [
        Dimension::Contextuality,
        Dimension::Interpersonality,
        Dimension::Normativity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Contextuality => "contextuality",
            Dimension::Interpersonality => "interpersonality",
            Dimension::Normativity => "normativity",
        }
    }
}

/// How latent clusters are related to explicit ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    CrossAttention,
    /// Row-wise MLP over concatenated latent and explicit centroids.
    ConcatMlp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    #[default]
    ExpertChoice,
    /// Every expert sees every example with equal weight.
    Uniform,
}

/// Cosine decay of the Gumbel temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GumbelSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for GumbelSchedule {
    fn default() -> Self {
        Self { start: 1.0, end: 0.2 }
    }
}

impl GumbelSchedule {
    /// Temperature at `step` of `total_steps`; `start` at step 0 and `end`
    /// at the last step.
    pub fn at(&self, step: usize, total_steps: usize) -> f64 {
        let t = if total_steps <= 1 {
            1.0
        } else {
            (step as f64 / (total_steps - 1) as f64).clamp(0.0, 1.0)
        };
        self.end + (self.start - self.end) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn final_temperature(&self) -> f64 {
        self.end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    pub clusters: usize,
    pub cluster_hidden: usize,
    /// Width of aligned cluster features.
    pub d_align: usize,
    pub attention_heads: usize,
    pub experts_per_dimension: usize,
    pub top_k: usize,
    pub expert_layers: usize,
    pub expert_heads: usize,
    pub expert_d_ff: usize,
    pub fusion_hidden: usize,
    pub d_calib: usize,
    pub gumbel: GumbelSchedule,
    #[serde(default)]
    pub fusion: FusionMode,
    #[serde(default)]
    pub routing: RoutingMode,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            clusters: 5,
            cluster_hidden: 256,
            d_align: 64,
            attention_heads: 8,
            experts_per_dimension: 4,
            top_k: 2,
            expert_layers: 2,
            expert_heads: 4,
            expert_d_ff: 256,
            fusion_hidden: 128,
            d_calib: 64,
            gumbel: GumbelSchedule::default(),
            fusion: FusionMode::default(),
            routing: RoutingMode::default(),
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clusters", self.clusters),
            ("cluster_hidden", self.cluster_hidden),
            ("d_align", self.d_align),
            ("attention_heads", self.attention_heads),
            ("experts_per_dimension", self.experts_per_dimension),
            ("expert_layers", self.expert_layers),
            ("expert_heads", self.expert_heads),
            ("expert_d_ff", self.expert_d_ff),
            ("fusion_hidden", self.fusion_hidden),
            ("d_calib", self.d_calib),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CalmError::Config(format!("alignment.{name} must be positive")));
            }
        }
        if self.top_k < 1 {
            return Err(CalmError::Config("alignment.top_k must be >= 1".into()));
        }
        if !self.d_align.is_multiple_of(self.attention_heads) {
            return Err(CalmError::Config(format!(
                "attention_heads {} does not divide d_align {}",
                self.attention_heads, self.d_align
            )));
        }
        if !self.d_align.is_multiple_of(self.expert_heads) {
            return Err(CalmError::Config(format!(
                "expert_heads {} does not divide d_align {}",
                self.expert_heads, self.d_align
            )));
        }
        if !(self.gumbel.start > 0.0 && self.gumbel.end > 0.0) {
            return Err(CalmError::Config("Gumbel temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// Row-stochastic soft assignment of tokens to clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub z: Mat,
    pub channel: Channel,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.z.ncols()
    }

    /// Largest deviation of a row sum from 1.
    pub fn row_sum_error(&self) -> f64 {
        self.z
            .rows()
            .into_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterMatrix {
    pub centroids: Mat,
    pub mass: Vec<f64>,
}

pub fn sample_gumbel(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let d = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    Mat::from_shape_fn((rows, cols), |_| d.sample(rng))
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(CalmError::Config(format!(
            "Gumbel temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

/// `softmax((logits + g) / temperature)` with `g` drawn from `seed`.
pub fn gumbel_assign(logits: &Mat, temperature: f64, seed: u64, channel: Channel) -> Result<ClusterAssignment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = sample_gumbel(logits.nrows(), logits.ncols(), &mut rng);
    gumbel_assign_with_noise(logits, &noise, temperature, channel)
}

pub fn gumbel_assign_with_noise(
    logits: &Mat,
    noise: &Mat,
    temperature: f64,
    channel: Channel,
) -> Result<ClusterAssignment> {
    check_temperature(temperature)?;
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(CalmError::Input("cluster logits must be finite".into()));
    }
    if logits.dim() != noise.dim() {
        return Err(CalmError::Contract("Gumbel noise shape differs from logits".into()));
    }
    let scaled = (logits + noise) / temperature;
    Ok(ClusterAssignment {
        z: softmax_rows_value(&scaled, false),
        channel,
    })
}

/// Graph form of [`gumbel_assign_with_noise`].
pub fn gumbel_softmax(g: &mut Graph, logits: Var, noise: &Mat, temperature: f64) -> Var {
    let n = g.constant(noise.clone());
    let x = g.add(logits, n);
    let x = g.scale(x, 1.0 / temperature);
    g.softmax_rows(x)
}

/// Mass-weighted centroids `zᵀh / max(mass, ε)` and the masses, in graph
/// form: `(K × d, 1 × K)`.
pub fn cluster_summaries_graph(g: &mut Graph, h: Var, z: Var) -> (Var, Var) {
    let zt = g.transpose(z);
    let weighted = g.matmul(zt, h);
    let mass = g.sum_rows(z);
    let mass_col = g.transpose(mass);
    let inv = g.recip_clamp(mass_col, MASS_EPS);
    (g.mul_col(weighted, inv), mass)
}

pub fn cluster_summaries(h_refined: &Mat, z: &ClusterAssignment) -> Result<ClusterMatrix> {
    if h_refined.nrows() != z.z.nrows() {
        return Err(CalmError::Contract(format!(
            "{} token rows but {} assignment rows",
            h_refined.nrows(),
            z.z.nrows()
        )));
    }
    let params = Params::new();
    let mut g = Graph::new(&params);
    let h = g.constant(h_refined.clone());
    let zv = g.constant(z.z.clone());
    let (c, m) = cluster_summaries_graph(&mut g, h, zv);
    Ok(ClusterMatrix {
        centroids: g.value(c).clone(),
        mass: g.value(m).iter().copied().collect(),
    })
}

/// Expert-choice routing outcome for one dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub dimension: Dimension,
    /// `[experts × B]`.
    pub scores: Mat,
    /// Per expert, the chosen example indices in ascending order.
    pub selected: Vec<Vec<usize>>,
    /// Per example, `(expert, gate)` pairs in ascending expert order.
    pub gates: Vec<Vec<(usize, f64)>>,
}

impl RoutingDecision {
    pub fn batch_size(&self) -> usize {
        self.scores.ncols()
    }

    pub fn experts(&self) -> usize {
        self.scores.nrows()
    }

    /// Selecting experts of example `b`.
    pub fn selectors(&self, b: usize) -> Vec<usize> {
        self.gates[b].iter().map(|&(e, _)| e).collect()
    }

    pub fn total_selections(&self) -> usize {
        self.selected.iter().map(Vec::len).sum()
    }

    /// Gate mass per expert.
    pub fn importance(&self) -> Vec<f64> {
        let mut imp = vec![0.0; self.experts()];
        for gates in &self.gates {
            for &(e, a) in gates {
                imp[e] += a;
            }
        }
        imp
    }

    /// Fraction of examples with at least one selecting expert.
    pub fn coverage(&self) -> f64 {
        let b = self.batch_size();
        if b == 0 {
            return 0.0;
        }
        self.gates.iter().filter(|g| !g.is_empty()).count() as f64 / b as f64
    }
}

/// Each expert (row of `scores`) takes its `min(k, B)` highest-scoring
/// examples, lower index first on ties. A covered example's gates are a
/// softmax over the scores of the experts that took it.
pub fn expert_choice_route(dimension: Dimension, scores: &Mat, k: usize) -> Result<RoutingDecision> {
    if k < 1 {
        return Err(CalmError::Config("routing k must be >= 1".into()));
    }
    let (experts, b) = scores.dim();
    let take = k.min(b);
    let mut selected = Vec::with_capacity(experts);
    let mut chosen_by: Vec<Vec<usize>> = vec![Vec::new(); b];
    for e in 0..experts {
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&x, &y| scores[[e, y]].total_cmp(&scores[[e, x]]).then(x.cmp(&y)));
        let mut picks: Vec<usize> = order[..take].to_vec();
        picks.sort_unstable();
        for &i in &picks {
            chosen_by[i].push(e);
        }
        selected.push(picks);
    }
    let gates = chosen_by
        .iter()
        .enumerate()
        .map(|(i, es)| gate_softmax(es.iter().map(|&e| (e, scores[[e, i]]))))
        .collect();
    Ok(RoutingDecision {
        dimension,
        scores: scores.clone(),
        selected,
        gates,
    })
}

/// Every expert takes every example with gate `1/K_d`.
pub fn uniform_route(dimension: Dimension, scores: &Mat) -> RoutingDecision {
    let (experts, b) = scores.dim();
    let share = 1.0 / experts as f64;
    RoutingDecision {
        dimension,
        scores: scores.clone(),
        selected: vec![(0..b).collect(); experts],
        gates: vec![(0..experts).map(|e| (e, share)).collect(); b],
    }
}

fn gate_softmax(entries: impl Iterator<Item = (usize, f64)>) -> Vec<(usize, f64)> {
    let entries: Vec<(usize, f64)> = entries.collect();
    let m = entries.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = entries.iter().map(|e| (e.1 - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    entries.iter().zip(exps).map(|(e, x)| (e.0, x / z)).collect()
}

/// Mean squared coefficient of variation of per-expert importance across
/// the given routings.
pub fn load_balance_value(routings: &[RoutingDecision]) -> f64 {
    if routings.is_empty() {
        return 0.0;
    }
    routings
        .iter()
        .map(|r| crate::autograd::cv_squared_value(&r.importance()))
        .sum::<f64>()
        / routings.len() as f64
}

/// Per-dimension routing summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionStats {
    pub dimension: Dimension,
    pub importance: Vec<f64>,
    pub importance_cv2: f64,
    pub coverage: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub dimensions: Vec<DimensionStats>,
    pub batches: usize,
}

impl RoutingStats {
    /// Accumulates importance and averages coverage over batches.
    pub fn record(&mut self, routings: &[RoutingDecision]) {
        if self.dimensions.is_empty() {
            self.dimensions = routings
                .iter()
                .map(|r| DimensionStats {
                    dimension: r.dimension,
                    importance: vec![0.0; r.experts()],
                    importance_cv2: 0.0,
                    coverage: 0.0,
                })
                .collect();
        }
        let n = self.batches as f64;
        for (s, r) in self.dimensions.iter_mut().zip(routings) {
            for (acc, v) in s.importance.iter_mut().zip(r.importance()) {
                *acc += v;
            }
            s.coverage = (s.coverage * n + r.coverage()) / (n + 1.0);
            s.importance_cv2 = crate::autograd::cv_squared_value(&s.importance);
        }
        self.batches += 1;
    }
}

/// Fixed Gumbel noise for a batch: one `(explicit, latent)` pair of
/// `n_tokens × K` matrices per example.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentNoise {
    pub per_example: Vec<(Mat, Mat)>,
}

impl AlignmentNoise {
    pub fn sample(lengths: &[usize], k: usize, rng: &mut impl Rng) -> Self {
        Self {
            per_example: lengths
                .iter()
                .map(|&n| (sample_gumbel(n, k, rng), sample_gumbel(n, k, rng)))
                .collect(),
        }
    }

    pub fn zeros(lengths: &[usize], k: usize) -> Self {
        Self {
            per_example: lengths
                .iter()
                .map(|&n| (Mat::zeros((n, k)), Mat::zeros((n, k))))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Expert {
    pub stack: TransformerStack,
    pub out: Linear,
}

impl Expert {
    /// Mean over rows of the block output, `1 × d_align`.
    pub fn forward(&self, g: &mut Graph, h_align: Var, ctx: &mut ForwardCtx) -> Var {
        let x = self.stack.forward(g, h_align, false, ctx);
        let x = self.out.forward(g, x);
        g.mean_rows(x)
    }
}

/// Gating projection and experts of one dimension.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub dimension: Dimension,
    pub gate: Linear,
    pub experts: Vec<Expert>,
}

impl ExpertBank {
    fn new(pb: &mut ParamBuilder, dimension: Dimension, c: &AlignmentConfig) -> Self {
        let mut s = pb.scope(dimension.name());
        let gate = Linear::new(&mut s, "gate", c.d_align, c.experts_per_dimension);
        let experts = (0..c.experts_per_dimension)
            .map(|e| {
                let mut es = s.scope(&format!("expert{e}"));
                Expert {
                    stack: TransformerStack::new(
                        &mut es,
                        "block",
                        c.expert_layers,
                        c.d_align,
                        c.expert_heads,
                        c.expert_d_ff,
                    ),
                    out: Linear::without_bias(&mut es, "out", c.d_align, c.d_align),
                }
            })
            .collect();
        Self {
            dimension,
            gate,
            experts,
        }
    }

    /// `scores[k, b] = pooled_b · W_k + b_k`, `[experts × B]`.
    pub fn scores(&self, g: &mut Graph, pooled: Var) -> Var {
        let s = self.gate.forward(g, pooled);
        g.transpose(s)
    }

    /// Gate-weighted expert outputs, one `1 × d_align` row per example;
    /// uncovered examples get zeros. Also returns the `1 × experts`
    /// importance vector.
    pub fn dimension_output(
        &self,
        g: &mut Graph,
        routing: &RoutingDecision,
        scores: Var,
        h_align: &[Var],
        uniform: bool,
        ctx: &mut ForwardCtx,
    ) -> (Vec<Var>, Var) {
        let b = h_align.len();
        let d = g.shape(h_align[0]).1;
        let n_exp = self.experts.len();
        let mut outs = Vec::with_capacity(b);
        let mut imp_parts = Vec::with_capacity(b);
        for i in 0..b {
            let sel = routing.selectors(i);
            if sel.is_empty() {
                outs.push(g.zeros(1, d));
                continue;
            }
            let gates = if uniform {
                g.constant(Mat::from_shape_fn((1, sel.len()), |(_, j)| routing.gates[i][j].1))
            } else {
                let coords: Vec<(usize, usize)> = sel.iter().map(|&e| (e, i)).collect();
                let s = g.gather(scores, &coords);
                g.softmax_rows(s)
            };
            let mut acc: Option<Var> = None;
            for (j, &e) in sel.iter().enumerate() {
                let y = self.experts[e].forward(g, h_align[i], ctx);
                let a = g.slice_cols(gates, j, 1);
                let term = g.mul_col(y, a);
                acc = Some(match acc {
                    Some(prev) => g.add(prev, term),
                    None => term,
                });
            }
            outs.push(acc.expect("covered example has a selector"));
            imp_parts.push(g.scatter_cols(gates, &sel, n_exp));
        }
        let importance = if imp_parts.is_empty() {
            g.zeros(1, n_exp)
        } else {
            let cat = g.concat_rows(&imp_parts);
            g.sum_rows(cat)
        };
        (outs, importance)
    }
}

/// Per-example graph handles of the fused identity.
#[derive(Clone, Copy, Debug)]
pub struct IdentityVars {
    /// `n × 2d`.
    pub h_self: Var,
    /// `1 × 2d`.
    pub pooled: Var,
    /// `1 × d_calib`.
    pub calib: Var,
}

/// Materialized identity of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityState {
    pub h_self: Mat,
    pub pooled: Vec<f64>,
    pub calib: Vec<f64>,
}

impl IdentityState {
    pub fn from_vars(g: &Graph, v: &IdentityVars) -> Self {
        Self {
            h_self: g.value(v.h_self).clone(),
            pooled: g.value(v.pooled).iter().copied().collect(),
            calib: g.value(v.calib).iter().copied().collect(),
        }
    }
}

/// Everything a forward pass through the pool produces.
pub struct AlignmentVars {
    pub identities: Vec<IdentityVars>,
    pub routings: Vec<RoutingDecision>,
    pub balance_loss: Var,
    /// `(z_explicit, z_latent)` per example.
    pub assignments: Vec<(Var, Var)>,
    /// `K × d_align` per example.
    pub h_align: Vec<Var>,
    /// Per-dimension `1 × d_align` outputs, indexed `[dimension][example]`.
    pub dimension_outputs: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct AlignmentPool {
    pub config: AlignmentConfig,
    pub d: usize,
    pub explicit_cluster: Mlp,
    pub latent_cluster: Mlp,
    pub cross: Option<MultiHeadAttention>,
    pub concat: Option<Mlp>,
    pub banks: Vec<ExpertBank>,
    pub fuse_in: Linear,
    pub fuse_out: Linear,
    pub calib: Linear,
}

impl AlignmentPool {
    /// `d` is the width of each refined channel.
    pub fn new(pb: &mut ParamBuilder, d: usize, config: &AlignmentConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut s = pb.scope("alignment");
        let explicit_cluster = Mlp::new(&mut s, "cluster_explicit", d, c.cluster_hidden, c.clusters);
        let latent_cluster = Mlp::new(&mut s, "cluster_latent", d, c.cluster_hidden, c.clusters);
        let (cross, concat) = match c.fusion {
            FusionMode::CrossAttention => (
                Some(MultiHeadAttention::new(&mut s, "cross", d, d, c.d_align, c.attention_heads)),
                None,
            ),
            FusionMode::ConcatMlp => (
                None,
                Some(Mlp::new(&mut s, "concat", 2 * d, c.d_align, c.d_align)),
            ),
        };
        let banks = Dimension::ALL
            .iter()
            .map(|&dim| ExpertBank::new(&mut s, dim, c))
            .collect();
        Ok(Self {
            config: c.clone(),
            d,
            explicit_cluster,
            latent_cluster,
            cross,
            concat,
            banks,
            fuse_in: Linear::without_bias(&mut s, "fuse_in", 3 * c.d_align, c.fusion_hidden),
            fuse_out: Linear::without_bias(&mut s, "fuse_out", c.fusion_hidden, 2 * d),
            calib: Linear::new(&mut s, "calib", 2 * d, c.d_calib),
        })
    }

    /// Latent centroids attend over explicit centroids: `K × d_align`.
    pub fn cross_attend(&self, g: &mut Graph, c_latent: Var, c_explicit: Var, ctx: &mut ForwardCtx) -> Var {
        match (&self.cross, &self.concat) {
            (Some(attn), _) => attn.forward(g, c_latent, c_explicit, false),
            (None, Some(mlp)) => {
                let cat = g.concat_cols(&[c_latent, c_explicit]);
                mlp.forward(g, cat, ctx)
            }
            (None, None) => unreachable!("pool built with one relation module"),
        }
    }

    /// Residual fusion of one example: `h_self = (h_exp ⊕ h_lat) + f(outs)`.
    pub fn fuse(
        &self,
        g: &mut Graph,
        dim_outs: &[Var],
        h_explicit: Var,
        h_latent: Var,
        ctx: &mut ForwardCtx,
    ) -> IdentityVars {
        let cat = g.concat_cols(dim_outs);
        let f = self.fuse_in.forward(g, cat);
        let f = g.relu(f);
        let f = ctx.dropout(g, f);
        let f = self.fuse_out.forward(g, f);
        let base = g.concat_cols(&[h_explicit, h_latent]);
        let h_self = g.add_row(base, f);
        let pooled = g.mean_rows(h_self);
        let calib = self.calib.forward(g, pooled);
        IdentityVars { h_self, pooled, calib }
    }

    /// Full pool over a batch of refined token matrices.
    pub fn forward(
        &self,
        g: &mut Graph,
        explicit: &[Var],
        latent: &[Var],
        noise: &AlignmentNoise,
        temperature: f64,
        ctx: &mut ForwardCtx,
    ) -> Result<AlignmentVars> {
        check_temperature(temperature)?;
        let b = explicit.len();
        if b == 0 || latent.len() != b || noise.per_example.len() != b {
            return Err(CalmError::Contract(
                "alignment forward needs matching non-empty explicit, latent and noise batches".into(),
            ));
        }
        let mut assignments = Vec::with_capacity(b);
        let mut h_align = Vec::with_capacity(b);
        let mut pooled = Vec::with_capacity(b);
        for i in 0..b {
            let (ne, nl) = &noise.per_example[i];
            let n = g.shape(explicit[i]).0;
            if g.shape(latent[i]).0 != n || ne.dim() != (n, self.config.clusters) || nl.dim() != ne.dim() {
                return Err(CalmError::Contract(format!("example {i}: token or noise shape mismatch")));
            }
            let le = self.explicit_cluster.forward(g, explicit[i], ctx);
            let ze = gumbel_softmax(g, le, ne, temperature);
            let ll = self.latent_cluster.forward(g, latent[i], ctx);
            let zl = gumbel_softmax(g, ll, nl, temperature);
            let (ce, _) = cluster_summaries_graph(g, explicit[i], ze);
            let (cl, _) = cluster_summaries_graph(g, latent[i], zl);
            let ha = self.cross_attend(g, cl, ce, ctx);
            pooled.push(g.mean_rows(ha));
            h_align.push(ha);
            assignments.push((ze, zl));
        }
        let pooled = g.concat_rows(&pooled);
        let uniform = self.config.routing == RoutingMode::Uniform;
        let mut routings = Vec::with_capacity(3);
        let mut dimension_outputs = Vec::with_capacity(3);
        let mut balance = Vec::with_capacity(3);
        for bank in &self.banks {
            let scores = bank.scores(g, pooled);
            let routing = if uniform {
                uniform_route(bank.dimension, g.value(scores))
            } else {
                expert_choice_route(bank.dimension, g.value(scores), self.config.top_k)?
            };
            let (outs, importance) = bank.dimension_output(g, &routing, scores, &h_align, uniform, ctx);
            balance.push(g.cv_squared(importance));
            routings.push(routing);
            dimension_outputs.push(outs);
        }
        let cat = g.concat_cols(&balance);
        let balance_loss = g.mean_all(cat);
        let identities = (0..b)
            .map(|i| {
                let outs: Vec<Var> = dimension_outputs.iter().map(|d| d[i]).collect();
                self.fuse(g, &outs, explicit[i], latent[i], ctx)
            })
            .collect();
        Ok(AlignmentVars {
            identities,
            routings,
            balance_loss,
            assignments,
            h_align,
            dimension_outputs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_without_noise_split_evenly() {
        let z = gumbel_assign_with_noise(&Mat::zeros((3, 5)), &Mat::zeros((3, 5)), 0.7, Channel::Latent)
            .unwrap();
        assert!(z.z.iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn cold_temperature_is_one_hot() {
        let logits = array![[2.0, 0.0, 0.0, 0.0, 0.0]];
        let z = gumbel_assign_with_noise(&logits, &Mat::zeros((1, 5)), 0.01, Channel::Explicit).unwrap();
        assert!(z.z[[0, 0]] > 1.0 - 1e-6);
    }

    #[test]
    fn seeded_assignment_is_reproducible_and_stochastic() {
        let logits = Mat::from_shape_fn((4, 5), |(i, j)| (i * j) as f64 * 0.1);
        let a = gumbel_assign(&logits, 0.5, 3, Channel::Explicit).unwrap();
        let b = gumbel_assign(&logits, 0.5, 3, Channel::Explicit).unwrap();
        assert_eq!(a, b);
        assert!(a.row_sum_error() < 1e-9);
        assert!(matches!(
            gumbel_assign(&logits, 0.0, 3, Channel::Explicit),
            Err(CalmError::Config(_))
        ));
    }

    #[test]
    fn all_mass_on_one_cluster() {
        let h = array![[1.0, 2.0], [3.0, 4.0], [5.0, 0.0]];
        let mut z = Mat::zeros((3, 3));
        z.column_mut(0).fill(1.0);
        let c = cluster_summaries(&h, &ClusterAssignment { z, channel: Channel::Explicit }).unwrap();
        assert_eq!(c.mass, vec![3.0, 0.0, 0.0]);
        assert!((c.centroids[[0, 0]] - 3.0).abs() < 1e-12 && (c.centroids[[0, 1]] - 2.0).abs() < 1e-12);
        assert!(c.centroids.row(1).iter().chain(c.centroids.row(2).iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn schedule_endpoints() {
        let s = GumbelSchedule::default();
        assert!((s.at(0, 100) - 1.0).abs() < 1e-12);
        assert!((s.at(99, 100) - 0.2).abs() < 1e-12);
        assert!((s.at(49, 99) - 0.6).abs() < 1e-12);
        assert!(s.at(10, 100) > s.at(11, 100));
    }

    #[test]
    fn single_expert_picks_top_two() {
        let r = expert_choice_route(Dimension::Normativity, &array![[0.9, 0.1, 0.5, 0.7]], 2).unwrap();
        assert_eq!(r.selected, vec![vec![0, 3]]);
        assert_eq!(r.gates[0], vec![(0, 1.0)]);
        assert_eq!(r.gates[3], vec![(0, 1.0)]);
        assert!(r.gates[1].is_empty() && r.gates[2].is_empty());
        assert_eq!(r.coverage(), 0.5);
    }

    #[test]
    fn shared_example_gates_are_softmax() {
        let r = expert_choice_route(Dimension::Contextuality, &array![[0.9, 0.1], [0.7, 0.0]], 1).unwrap();
        assert_eq!(r.selected, vec![vec![0], vec![0]]);
        assert!((r.gates[0][0].1 - 0.5498).abs() < 1e-4);
        assert!((r.gates[0][1].1 - 0.4502).abs() < 1e-4);
    }

    #[test]
    fn ties_go_to_lower_index_and_small_batches_are_exhausted() {
        let r = expert_choice_route(Dimension::Contextuality, &array![[0.5, 0.5, 0.5]], 2).unwrap();
        assert_eq!(r.selected, vec![vec![0, 1]]);
        let r = expert_choice_route(Dimension::Contextuality, &array![[0.1, 0.2], [0.3, 0.0]], 5).unwrap();
        assert_eq!(r.selected, vec![vec![0, 1], vec![0, 1]]);
        assert!(expert_choice_route(Dimension::Contextuality, &array![[0.1]], 0).is_err());
    }

    #[test]
    fn balance_of_one_hot_importance() {
        let r = RoutingDecision {
            dimension: Dimension::Contextuality,
            scores: Mat::zeros((2, 1)),
            selected: vec![vec![0], vec![]],
            gates: vec![vec![(0, 1.0)]],
        };
        assert!((load_balance_value(&[r]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let c = AlignmentConfig {
            attention_heads: 7,
            ..AlignmentConfig::default()
        };
        assert!(matches!(c.validate(), Err(CalmError::Config(_))));
    }
}
