//! Training loop: contrastive batch sampling, weighted loss composition,
//! reflection inside the step, clipping and AdamW, with per-epoch metrics.

use serde::{Deserialize, Serialize};

use crate::alignment::RoutingStats;
use crate::autograd::{Graph, Params, Var};
use crate::corpus::{sample_pair_indices, split_indices, Example};
use crate::error::{CalmError, Result};
use crate::model::{sub_seed, BatchForward, CalmModel, LossTerms, ModelConfig, Stage, StepOptions};
use crate::optim::{clip_grad_norm, lr_schedule, AdamW};

pub type LossWeights = LossTerms<f64>;

impl LossWeights {
    pub fn standard() -> Self {
        Self {
            task: 1.0,
            window: 1.0,
            explicit_aux: 0.5,
            latent_aux: 0.5,
            balance: 0.01,
            identity: 0.5,
        }
    }
}

fn default_weights() -> LossWeights {
    LossWeights::standard()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_weights")]
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub grad_clip: f64,
    /// Train/validation/test proportions of the corpus.
    pub split: [f64; 3],
    /// Optimizer steps per epoch; defaults to one pass over the training
    /// split worth of anchors.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    /// Leading epochs that train only the encoder side before joint
    /// training; 0 trains everything jointly throughout.
    #[serde(default)]
    pub contrastive_only_epochs: usize,
    /// Batches held fixed for the per-epoch probe loss.
    pub probe_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            epochs: 10,
            batch_size: 64,
            loss_weights: LossWeights::standard(),
            seed: 7,
            grad_clip: 1.0,
            split: [0.8, 0.1, 0.1],
            steps_per_epoch: None,
            contrastive_only_epochs: 0,
            probe_batches: 2,
        }
    }
}

impl TrainConfig {
    /// Step size and epoch budget for the desk-scale model.
    pub fn desk() -> Self {
        Self {
            learning_rate: 2e-3,
            epochs: 12,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(CalmError::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(CalmError::Config("weight_decay must be >= 0".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(CalmError::Config("warmup_fraction must lie in (0, 1)".into()));
        }
        if self.batch_size < 2 {
            return Err(CalmError::Config("batch_size must be >= 2".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(CalmError::Config("grad_clip must be positive".into()));
        }
        for (name, w) in self.loss_weights.named() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(CalmError::Config(format!("loss weight {name} must be finite and >= 0")));
            }
        }
        if self.contrastive_only_epochs > self.epochs {
            return Err(CalmError::Config("contrastive_only_epochs exceeds epochs".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(CalmError::Config("steps_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

/// Weighted sum of the loss terms on the graph.
pub fn total_loss(g: &mut Graph, terms: &LossTerms<Var>, weights: &LossWeights) -> Var {
    let parts: Vec<Var> = terms
        .named()
        .iter()
        .zip(weights.named())
        .map(|((_, v), (_, w))| g.scale(*v, w))
        .collect();
    let cat = g.concat_cols(&parts);
    g.sum_all(cat)
}

/// Weighted terms and their sum, evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: LossTerms<f64>,
    pub weighted: LossTerms<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn evaluate(g: &Graph, terms: &LossTerms<Var>, weights: &LossWeights, total: Var) -> Self {
        let raw = terms.map(|v| g.scalar(v));
        let mut w = weights.named().into_iter().map(|(_, w)| w);
        let weighted = raw.map(|x| x * w.next().expect("six weights"));
        Self {
            terms: raw,
            weighted,
            total: g.scalar(total),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: Stage,
    /// Means over the epoch's training steps (absent for epoch 0).
    pub train: Option<LossTerms<f64>>,
    pub train_total: Option<f64>,
    /// Loss terms on the fixed probe batches, evaluated without dropout
    /// at the epoch's end (epoch 0 is the initialization).
    pub probe: LossTerms<f64>,
    pub probe_window_explicit: f64,
    pub probe_window_latent: f64,
    pub correction_rate: f64,
    pub mean_delta: f64,
    pub task_accuracy: f64,
    pub gumbel_temperature: f64,
    pub learning_rate: f64,
    pub grad_norm: f64,
    pub importance_cv2: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsHistory {
    pub fn initial(&self) -> Option<&EpochMetrics> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

pub struct TrainOutcome {
    pub model: CalmModel,
    pub params: Params,
    pub history: MetricsHistory,
    pub routing: RoutingStats,
    pub splits: [Vec<usize>; 3],
}

fn check_finite(b: &LossBreakdown, step: usize) -> Result<()> {
    for (name, v) in b.terms.named() {
        if !v.is_finite() {
            return Err(CalmError::NonFinite {
                term: name.to_string(),
                step,
            });
        }
    }
    if !b.total.is_finite() {
        return Err(CalmError::NonFinite {
            term: "total".into(),
            step,
        });
    }
    Ok(())
}

struct Batch<'c> {
    anchors: Vec<&'c Example>,
    positives: Vec<&'c Example>,
}

fn batch_from<'c>(pool: &[&'c Example], seed: u64, size: usize) -> Result<Batch<'c>> {
    let view: Vec<Example> = pool.iter().map(|e| (*e).clone()).collect();
    let (a, p) = sample_pair_indices(&view, size, seed)?;
    Ok(Batch {
        anchors: a.iter().map(|&i| pool[i]).collect(),
        positives: p.iter().map(|&i| pool[i]).collect(),
    })
}

/// Routing statistics of a trained model over `ceil(len / batch_size)`
/// evaluation batches drawn from `examples`, at the final Gumbel temperature.
pub fn routing_stats(
    model: &CalmModel,
    params: &Params,
    examples: &[&Example],
    batch_size: usize,
    seed: u64,
) -> Result<RoutingStats> {
    let mut stats = RoutingStats::default();
    let size = batch_size.min(examples.len());
    let temp = model.config.alignment.gumbel.final_temperature();
    for i in 0..examples.len().div_ceil(batch_size.max(1)) {
        let b = batch_from(examples, sub_seed(seed, &format!("route{i}")), size)?;
        let mut g = Graph::new(params);
        let opts = StepOptions::eval(sub_seed(seed, &format!("route-noise{i}")), temp);
        let f = model.forward_batch(&mut g, &b.anchors, &b.positives, &opts)?;
        stats.record(&f.routings);
    }
    Ok(stats)
}

/// Trains a freshly initialized model on the training split of `corpus`.
pub fn train(model_config: &ModelConfig, config: &TrainConfig, corpus: &[Example]) -> Result<TrainOutcome> {
    train_with(model_config, config, corpus, |_| {})
}

/// [`train`] with a callback after each epoch's metrics are recorded.
pub fn train_with(
    model_config: &ModelConfig,
    config: &TrainConfig,
    corpus: &[Example],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    let (model, mut params) = CalmModel::build(model_config, config.seed)?;
    for ex in corpus {
        model.check_example(ex)?;
    }
    let splits = split_indices(corpus, config.split)?;
    let train_pool: Vec<&Example> = splits[0].iter().map(|&i| &corpus[i]).collect();
    let probe_pool: Vec<&Example> = if splits[1].len() >= 4 {
        splits[1].iter().map(|&i| &corpus[i]).collect()
    } else {
        train_pool.clone()
    };
    let train_view: Vec<Example> = train_pool.iter().map(|e| (*e).clone()).collect();
    let steps_per_epoch = config
        .steps_per_epoch
        .unwrap_or_else(|| train_pool.len().div_ceil(config.batch_size).max(1));
    let total_steps = steps_per_epoch * config.epochs;
    let probe_size = config.batch_size.min(probe_pool.len().max(2));
    let probes: Vec<Batch> = (0..config.probe_batches)
        .map(|i| batch_from(&probe_pool, sub_seed(config.seed, &format!("probe{i}")), probe_size))
        .collect::<Result<_>>()?;

    let mut history = MetricsHistory::default();
    let mut routing = RoutingStats::default();
    let mut opt = AdamW::new(&params, config.weight_decay);
    let schedule = &model_config.alignment.gumbel;

    let initial_stage = if config.contrastive_only_epochs > 0 {
        Stage::Contrastive
    } else {
        Stage::Joint
    };
    let first = probe_metrics(&model, &params, &probes, config, 0, initial_stage, schedule.at(0, total_steps))?;
    on_epoch(&first);
    history.epochs.push(first);

    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let stage = if epoch <= config.contrastive_only_epochs {
            Stage::Contrastive
        } else {
            Stage::Joint
        };
        let mut sums = LossTerms::<f64>::default();
        let mut total_sum = 0.0;
        let (mut corrections, mut anchors_seen, mut correct, mut delta_sum) = (0usize, 0usize, 0usize, 0.0);
        let mut grad_norm = 0.0;
        let mut temp = schedule.at(step, total_steps);
        let mut lr = 0.0;
        let mut epoch_routing = RoutingStats::default();
        for _ in 0..steps_per_epoch {
            let step_seed = sub_seed(config.seed, &format!("step{step}"));
            let (a, p) = sample_pair_indices(&train_view, config.batch_size, step_seed)?;
            let anchors: Vec<&Example> = a.iter().map(|&i| train_pool[i]).collect();
            let positives: Vec<&Example> = p.iter().map(|&i| train_pool[i]).collect();
            temp = schedule.at(step, total_steps);
            let opts = StepOptions {
                gumbel_temperature: temp,
                seed: step_seed,
                training: true,
                stage,
                noise: None,
                reflect: true,
            };
            let (breakdown, mut grads, fwd) = {
                let mut g = Graph::new(&params);
                let fwd = model.forward_batch(&mut g, &anchors, &positives, &opts)?;
                let total = total_loss(&mut g, &fwd.terms, &config.loss_weights);
                let b = LossBreakdown::evaluate(&g, &fwd.terms, &config.loss_weights, total);
                check_finite(&b, step)?;
                let grads = g.backward(total);
                (b, grads, Summary::of(&fwd, &anchors))
            };
            grad_norm = clip_grad_norm(&mut grads, config.grad_clip);
            lr = lr_schedule(step + 1, total_steps, config.learning_rate, config.warmup_fraction)?;
            opt.step(&mut params, &grads, lr);
            step += 1;

            for ((_, s), (_, v)) in sums_mut(&mut sums).into_iter().zip(breakdown.terms.named()) {
                *s += v;
            }
            total_sum += breakdown.total;
            corrections += fwd.corrections;
            anchors_seen += fwd.anchors;
            correct += fwd.correct;
            delta_sum += fwd.delta_sum;
            if !fwd.routings.is_empty() {
                epoch_routing.record(&fwd.routings);
                routing.record(&fwd.routings);
            }
        }
        let n = steps_per_epoch as f64;
        let mut m = probe_metrics(&model, &params, &probes, config, epoch, stage, temp)?;
        m.train = Some(sums.map(|s| s / n));
        m.train_total = Some(total_sum / n);
        let joint = stage == Stage::Joint && anchors_seen > 0;
        m.correction_rate = if joint { corrections as f64 / anchors_seen as f64 } else { 0.0 };
        m.mean_delta = if joint { delta_sum / anchors_seen as f64 } else { 0.0 };
        m.task_accuracy = if joint { correct as f64 / anchors_seen as f64 } else { 0.0 };
        m.learning_rate = lr;
        m.grad_norm = grad_norm;
        m.importance_cv2 = mean_cv2(&epoch_routing);
        on_epoch(&m);
        history.epochs.push(m);
    }
    Ok(TrainOutcome {
        model,
        params,
        history,
        routing,
        splits,
    })
}

fn sums_mut(t: &mut LossTerms<f64>) -> [(&'static str, &mut f64); 6] {
    [
        ("task", &mut t.task),
        ("window", &mut t.window),
        ("explicit_aux", &mut t.explicit_aux),
        ("latent_aux", &mut t.latent_aux),
        ("balance", &mut t.balance),
        ("identity", &mut t.identity),
    ]
}

fn mean_cv2(r: &RoutingStats) -> f64 {
    if r.dimensions.is_empty() {
        return 0.0;
    }
    r.dimensions.iter().map(|d| d.importance_cv2).sum::<f64>() / r.dimensions.len() as f64
}

struct Summary {
    corrections: usize,
    anchors: usize,
    correct: usize,
    delta_sum: f64,
    routings: Vec<crate::alignment::RoutingDecision>,
}

impl Summary {
    fn of(f: &BatchForward, anchors: &[&Example]) -> Self {
        Self {
            corrections: f.corrected.iter().filter(|&&c| c).count(),
            anchors: f.deltas.len(),
            correct: f
                .predictions
                .iter()
                .zip(anchors)
                .filter(|(p, a)| **p == a.task_label)
                .count(),
            delta_sum: f.deltas.iter().sum(),
            routings: f.routings.clone(),
        }
    }
}

fn probe_metrics(
    model: &CalmModel,
    params: &Params,
    probes: &[Batch],
    config: &TrainConfig,
    epoch: usize,
    stage: Stage,
    temperature: f64,
) -> Result<EpochMetrics> {
    let mut sums = LossTerms::<f64>::default();
    let (mut we, mut wl) = (0.0, 0.0);
    for (i, b) in probes.iter().enumerate() {
        let mut g = Graph::new(params);
        let opts = StepOptions {
            stage,
            ..StepOptions::eval(sub_seed(config.seed, &format!("probe-noise{i}")), temperature)
        };
        let f = model.forward_batch(&mut g, &b.anchors, &b.positives, &opts)?;
        for ((_, s), (_, v)) in sums_mut(&mut sums).into_iter().zip(f.terms.named()) {
            *s += g.scalar(v);
        }
        we += g.scalar(f.window_explicit);
        wl += g.scalar(f.window_latent);
    }
    let n = probes.len().max(1) as f64;
    Ok(EpochMetrics {
        epoch,
        stage,
        probe: sums.map(|s| s / n),
        probe_window_explicit: we / n,
        probe_window_latent: wl / n,
        gumbel_temperature: temperature,
        ..EpochMetrics::default()
    })
}
