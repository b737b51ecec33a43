//! Type-specific NT-Xent contrast over the explicit and latent channels.

use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, Graph, Var};
use crate::error::{CalmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Explicit,
    Latent,
}

impl Channel {
    pub const ALL: [Channel; 2] = [Channel::Explicit, Channel::Latent];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Explicit => "explicit",
            Channel::Latent => "latent",
        }
    }
}

/// Unit-norm embedding tagged with its channel and culture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedEmbedding {
    pub vector: Vec<f64>,
    pub channel: Channel,
    pub culture_id: usize,
}

impl ProjectedEmbedding {
    /// Normalizes `raw`; a zero vector is rejected.
    pub fn new(raw: &[f64], channel: Channel, culture_id: usize) -> Result<Self> {
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(CalmError::Input("cannot normalize a zero or non-finite vector".into()));
        }
        Ok(Self {
            vector: raw.iter().map(|x| x / norm).collect(),
            channel,
            culture_id,
        })
    }

    pub fn cosine(&self, other: &ProjectedEmbedding) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub batch_size: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            batch_size: 64,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(CalmError::Config(format!(
                "contrastive temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.batch_size < 2 {
            return Err(CalmError::Config("contrastive batch_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// `-log[exp(s_ap/τ) / (exp(s_ap/τ) + Σ_k exp(s_ak/τ))]` with cosine
/// similarities, evaluated through log-sum-exp.
pub fn nt_xent(
    anchor: &ProjectedEmbedding,
    positive: &ProjectedEmbedding,
    negatives: &[ProjectedEmbedding],
    temperature: f64,
) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(CalmError::Config("temperature must be positive".into()));
    }
    if positive.channel != anchor.channel || negatives.iter().any(|n| n.channel != anchor.channel) {
        return Err(CalmError::Contract("embeddings from different channels".into()));
    }
    if positive.culture_id != anchor.culture_id {
        return Err(CalmError::Contract("positive belongs to another culture".into()));
    }
    if negatives.is_empty() {
        return Err(CalmError::Contract("nt_xent needs at least one negative".into()));
    }
    if negatives.iter().any(|n| n.culture_id == anchor.culture_id) {
        return Err(CalmError::Contract("negative shares the anchor's culture".into()));
    }
    let pos = anchor.cosine(positive) / temperature;
    let logits = std::iter::once(pos).chain(negatives.iter().map(|n| anchor.cosine(n) / temperature));
    let lse = log_sum_exp(logits.collect::<Vec<_>>().into_iter());
    Ok((lse - pos).max(0.0))
}

/// Refined per-token features: rows of a channel's head output scaled to
/// unit norm.
pub fn refine_tokens(g: &mut Graph, h_channel: Var) -> Var {
    g.normalize_rows(h_channel)
}

/// Whole-input embedding: mean of refined token rows, re-normalized.
pub fn pooled_embedding(g: &mut Graph, refined_tokens: Var) -> Var {
    let m = g.mean_rows(refined_tokens);
    g.normalize_rows(m)
}

/// Per-channel and total contrastive losses of a batch.
#[derive(Clone, Copy, Debug)]
pub struct WindowLoss {
    pub explicit: Var,
    pub latent: Var,
    pub total: Var,
    /// Anchors that contributed (had at least one negative).
    pub active_anchors: usize,
}

/// NT-Xent of one channel over a batch whose members are the anchors
/// (`0..B`) followed by their positives (`B..2B`). Anchor `i` contrasts its
/// positive `B + i` against every member from a different culture; anchors
/// with no such member are left out of the mean.
pub fn channel_loss(
    g: &mut Graph,
    pooled: &[Var],
    member_cultures: &[usize],
    temperature: f64,
) -> Result<(Var, usize)> {
    let m = pooled.len();
    if !m.is_multiple_of(2) || m != member_cultures.len() || m == 0 {
        return Err(CalmError::Contract(
            "channel_loss expects anchors followed by an equal number of positives".into(),
        ));
    }
    let b = m / 2;
    for i in 0..b {
        if member_cultures[i] != member_cultures[b + i] {
            return Err(CalmError::Contract(format!("pair {i} crosses cultures")));
        }
    }
    let emb = g.concat_rows(pooled);
    let sims = g.matmul_t(emb, emb);
    let mut terms = Vec::with_capacity(b);
    for i in 0..b {
        let mut coords = vec![(i, b + i)];
        coords.extend(
            (0..m)
                .filter(|&k| member_cultures[k] != member_cultures[i])
                .map(|k| (i, k)),
        );
        if coords.len() == 1 {
            continue;
        }
        let row = g.gather(sims, &coords);
        let row = g.scale(row, 1.0 / temperature);
        let ls = g.log_softmax_rows(row);
        let pick = g.gather(ls, &[(0, 0)]);
        terms.push(pick);
    }
    if terms.is_empty() {
        return Ok((g.scalar_const(0.0), 0));
    }
    let n = terms.len();
    let cat = g.concat_cols(&terms);
    let s = g.sum_all(cat);
    Ok((g.scale(s, -1.0 / n as f64), n))
}

/// `L_window = L_explicit + L_latent`.
pub fn window_loss(
    g: &mut Graph,
    pooled_explicit: &[Var],
    pooled_latent: &[Var],
    member_cultures: &[usize],
    temperature: f64,
) -> Result<WindowLoss> {
    let (explicit, n) = channel_loss(g, pooled_explicit, member_cultures, temperature)?;
    let (latent, _) = channel_loss(g, pooled_latent, member_cultures, temperature)?;
    let total = g.add(explicit, latent);
    Ok(WindowLoss {
        explicit,
        latent,
        total,
        active_anchors: n,
    })
}
