//! Embedding probes, classification metrics, stereotype prevalence,
//! out-of-choice rate and attribution-similarity statistics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::alignment::RoutingStats;
use crate::autograd::Params;
use crate::corpus::Example;
use crate::error::{CalmError, Result};
use crate::model::CalmModel;
use crate::reflect::cosine;

pub const ACC_AT: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub acc: f64,
    pub f1_macro: f64,
    pub acc_at: BTreeMap<usize, f64>,
}

fn check_embeddings(emb: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    if emb.len() != labels.len() {
        return Err(CalmError::Input(format!(
            "{} embeddings but {} labels",
            emb.len(),
            labels.len()
        )));
    }
    if let Some(first) = emb.first() {
        if emb.iter().any(|e| e.len() != first.len()) {
            return Err(CalmError::Input("embeddings differ in width".into()));
        }
    }
    Ok(())
}

/// Labels ordered by `(score desc, label asc)`.
fn rank_labels(scores: &BTreeMap<usize, f64>, classes: &[usize]) -> Vec<usize> {
    let mut order = classes.to_vec();
    order.sort_by(|a, b| {
        let sa = scores.get(a).copied().unwrap_or(0.0);
        let sb = scores.get(b).copied().unwrap_or(0.0);
        sb.total_cmp(&sa).then(a.cmp(b))
    });
    order
}

fn acc_at(rankings: &[Vec<usize>], labels: &[usize]) -> BTreeMap<usize, f64> {
    ACC_AT
        .iter()
        .map(|&k| {
            let hits = rankings
                .iter()
                .zip(labels)
                .filter(|(r, l)| r.iter().take(k).any(|x| x == *l))
                .count();
            (k, hits as f64 / labels.len().max(1) as f64)
        })
        .collect()
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
}

/// Leave-one-out neighbour rankings: for each point, labels ordered by
/// vote count among its `k` most cosine-similar others (nearer index
/// first on equal similarity), ties to the smaller label.
pub fn knn_rankings(emb: &[Vec<f64>], labels: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    check_embeddings(emb, labels)?;
    if k == 0 {
        return Err(CalmError::Config("k must be >= 1".into()));
    }
    if emb.len() < k + 1 {
        return Err(CalmError::Input(format!(
            "k-NN with k={k} needs at least {} points, got {}",
            k + 1,
            emb.len()
        )));
    }
    let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let norms: Vec<f64> = emb.iter().map(|e| e.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let n = emb.len();
    let mut out = Vec::with_capacity(n);
    let mut sims = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = emb[i].iter().zip(&emb[j]).map(|(a, b)| a * b).sum();
            let den = norms[i] * norms[j];
            sims[j] = if den > 0.0 { dot / den } else { 0.0 };
        }
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        let mut votes: BTreeMap<usize, f64> = BTreeMap::new();
        for &j in &order[..k] {
            *votes.entry(labels[j]).or_default() += 1.0;
        }
        out.push(rank_labels(&votes, &classes));
    }
    Ok(out)
}

pub fn knn_probe(emb: &[Vec<f64>], labels: &[usize], k: usize) -> Result<ProbeResult> {
    let rankings = knn_rankings(emb, labels, k)?;
    let preds: Vec<usize> = rankings.iter().map(|r| r[0]).collect();
    Ok(ProbeResult {
        acc: accuracy(&preds, labels),
        f1_macro: macro_f1(&preds, labels)?,
        acc_at: acc_at(&rankings, labels),
    })
}

/// Multinomial logistic regression fit by full-batch gradient descent with
/// backtracking line search.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    /// `[features + 1] × classes`, bias in the last row.
    pub weights: Vec<Vec<f64>>,
    pub classes: usize,
    pub iterations: usize,
}

pub const PROBE_TOL: f64 = 1e-6;
pub const PROBE_MAX_ITER: usize = 1000;
/// L2 penalty keeping the optimum finite on separable data.
pub const PROBE_L2: f64 = 1e-4;

fn logits_of(w: &[Vec<f64>], x: &[f64], classes: usize) -> Vec<f64> {
    let d = x.len();
    (0..classes)
        .map(|c| x.iter().enumerate().map(|(j, v)| v * w[j][c]).sum::<f64>() + w[d][c])
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn objective(w: &[Vec<f64>], xs: &[Vec<f64>], ys: &[usize], classes: usize) -> f64 {
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z = logits_of(w, x, classes);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - z[y];
    }
    let d = xs[0].len();
    let reg: f64 = w[..d].iter().flatten().map(|v| v * v).sum();
    loss / xs.len() as f64 + 0.5 * PROBE_L2 * reg
}

impl LogisticModel {
    pub fn fit(xs: &[Vec<f64>], ys: &[usize]) -> Result<Self> {
        check_embeddings(xs, ys)?;
        let distinct: BTreeSet<usize> = ys.iter().copied().collect();
        if distinct.len() < 2 {
            return Err(CalmError::Input("linear probe needs at least two classes".into()));
        }
        let classes = distinct.iter().max().expect("non-empty") + 1;
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mut w = vec![vec![0.0; classes]; d + 1];
        let mut f = objective(&w, xs, ys, classes);
        let mut step = 1.0;
        let mut iterations = 0;
        for it in 0..PROBE_MAX_ITER {
            iterations = it + 1;
            let mut grad = vec![vec![0.0; classes]; d + 1];
            for (x, &y) in xs.iter().zip(ys) {
                let mut p = softmax(&logits_of(&w, x, classes));
                p[y] -= 1.0;
                for c in 0..classes {
                    let pc = p[c] / n;
                    for j in 0..d {
                        grad[j][c] += pc * x[j];
                    }
                    grad[d][c] += pc;
                }
            }
            for j in 0..d {
                for c in 0..classes {
                    grad[j][c] += PROBE_L2 * w[j][c];
                }
            }
            let gnorm2: f64 = grad.iter().flatten().map(|v| v * v).sum();
            if gnorm2.sqrt() < PROBE_TOL {
                break;
            }
            let mut t = step * 2.0;
            let (next, fnext) = loop {
                let cand: Vec<Vec<f64>> = w
                    .iter()
                    .zip(&grad)
                    .map(|(wr, gr)| wr.iter().zip(gr).map(|(a, b)| a - t * b).collect())
                    .collect();
                let fc = objective(&cand, xs, ys, classes);
                if fc <= f - 0.5 * t * gnorm2 || t < 1e-12 {
                    break (cand, fc);
                }
                t *= 0.5;
            };
            step = t;
            let improvement = f - fnext;
            w = next;
            f = fnext;
            if improvement.abs() < PROBE_TOL * f.abs().max(1.0) * 1e-3 {
                break;
            }
        }
        Ok(Self {
            weights: w,
            classes,
            iterations,
        })
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        logits_of(&self.weights, x, self.classes)
    }
}

pub fn linear_probe(
    train_emb: &[Vec<f64>],
    train_labels: &[usize],
    test_emb: &[Vec<f64>],
    test_labels: &[usize],
) -> Result<ProbeResult> {
    check_embeddings(test_emb, test_labels)?;
    let model = LogisticModel::fit(train_emb, train_labels)?;
    let train_classes: BTreeSet<usize> = train_labels.iter().copied().collect();
    if let Some(l) = test_labels.iter().find(|l| !train_classes.contains(l)) {
        return Err(CalmError::Input(format!("test label {l} absent from training labels")));
    }
    if test_emb.iter().any(|e| e.len() != train_emb[0].len()) {
        return Err(CalmError::Input("test embeddings differ in width from training".into()));
    }
    let classes: Vec<usize> = (0..model.classes).collect();
    let rankings: Vec<Vec<usize>> = test_emb
        .iter()
        .map(|x| {
            let z = model.logits(x);
            rank_labels(&z.iter().copied().enumerate().collect(), &classes)
        })
        .collect();
    let preds: Vec<usize> = rankings.iter().map(|r| r[0]).collect();
    Ok(ProbeResult {
        acc: accuracy(&preds, test_labels),
        f1_macro: macro_f1(&preds, test_labels)?,
        acc_at: acc_at(&rankings, test_labels),
    })
}

/// Unweighted mean of per-class F1 over classes present in either list.
pub fn macro_f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(CalmError::Input(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let classes: BTreeSet<usize> = preds.iter().chain(labels).copied().collect();
    if classes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &c in &classes {
        let tp = preds.iter().zip(labels).filter(|(p, l)| **p == c && **l == c).count() as f64;
        let fp = preds.iter().zip(labels).filter(|(p, l)| **p == c && **l != c).count() as f64;
        let fn_ = preds.iter().zip(labels).filter(|(p, l)| **p != c && **l == c).count() as f64;
        let den = 2.0 * tp + fp + fn_;
        total += if den > 0.0 { 2.0 * tp / den } else { 0.0 };
    }
    Ok(total / classes.len() as f64)
}

/// Fraction of binary predictions equal to 1.
pub fn stereotype_rate(binary_preds: &[u8]) -> Result<f64> {
    if binary_preds.is_empty() {
        return Err(CalmError::Input("stereotype_rate of an empty list".into()));
    }
    if let Some(v) = binary_preds.iter().find(|&&v| v > 1) {
        return Err(CalmError::Input(format!("binary prediction {v} not in {{0, 1}}")));
    }
    Ok(binary_preds.iter().filter(|&&v| v == 1).count() as f64 / binary_preds.len() as f64)
}

/// Fraction of outputs outside `valid`.
pub fn ooc_rate(outputs: &[usize], valid: &BTreeSet<usize>) -> Result<f64> {
    if valid.is_empty() {
        return Err(CalmError::Config("valid output set is empty".into()));
    }
    if outputs.is_empty() {
        return Err(CalmError::Input("ooc_rate of an empty output list".into()));
    }
    Ok(outputs.iter().filter(|o| !valid.contains(o)).count() as f64 / outputs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    Cosine,
    Pearson,
    Js,
}

impl SimilarityMetric {
    /// Null-hypothesis value: no similarity.
    pub fn null_value(self) -> f64 {
        match self {
            SimilarityMetric::Cosine | SimilarityMetric::Pearson => 0.0,
            SimilarityMetric::Js => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub metric: SimilarityMetric,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub z: f64,
    pub p: f64,
    /// Zero sample variance: `z` is ±∞ (or 0 when the mean equals the
    /// null value) and `p` follows from it.
    pub degenerate: bool,
}

fn to_distribution(v: &[f64]) -> Result<Vec<f64>> {
    let s: f64 = v.iter().map(|x| x.abs()).sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(CalmError::Input("cannot turn a zero vector into a distribution".into()));
    }
    Ok(v.iter().map(|x| x.abs() / s).collect())
}

/// Jensen-Shannon divergence in nats after abs + L1 normalization.
pub fn js_divergence(a: &[f64], b: &[f64]) -> Result<f64> {
    let p = to_distribution(a)?;
    let q = to_distribution(b)?;
    let kl = |x: &[f64], m: &[f64]| -> f64 {
        x.iter()
            .zip(m)
            .filter(|(xi, _)| **xi > 0.0)
            .map(|(xi, mi)| xi * (xi / mi).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(&q).map(|(x, y)| 0.5 * (x + y)).collect();
    Ok((0.5 * kl(&p, &m) + 0.5 * kl(&q, &m)).max(0.0))
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(CalmError::Statistics("Pearson correlation of a constant vector".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

pub fn pair_metric(a: &[f64], b: &[f64], metric: SimilarityMetric) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(CalmError::Input("attribution vectors must be non-empty and equal length".into()));
    }
    match metric {
        SimilarityMetric::Cosine => {
            if a.iter().all(|x| *x == 0.0) || b.iter().all(|x| *x == 0.0) {
                return Err(CalmError::Input("cosine of a zero vector".into()));
            }
            Ok(cosine(a, b))
        }
        SimilarityMetric::Pearson => pearson(a, b),
        SimilarityMetric::Js => js_divergence(a, b),
    }
}

/// One-sample two-tailed Z-test of `mean` against the metric's null value.
pub fn z_test(mean: f64, std: f64, n: usize, metric: SimilarityMetric) -> Result<SimilarityStats> {
    if n < 2 {
        return Err(CalmError::Statistics(format!("need at least two pairs, got {n}")));
    }
    let diff = mean - metric.null_value();
    let (z, degenerate) = if std > 0.0 {
        (diff / (std / (n as f64).sqrt()), false)
    } else if diff == 0.0 {
        (0.0, true)
    } else {
        (diff.signum() * f64::INFINITY, true)
    };
    let normal = Normal::standard();
    let p = (2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0);
    Ok(SimilarityStats {
        metric,
        n,
        mean,
        std,
        z,
        p,
        degenerate,
    })
}

/// Per-pair metric, sample mean and (n−1) standard deviation, Z-test.
pub fn attribution_similarity(pairs: &[(Vec<f64>, Vec<f64>)], metric: SimilarityMetric) -> Result<SimilarityStats> {
    if pairs.len() < 2 {
        return Err(CalmError::Statistics(format!(
            "need at least two pairs, got {}",
            pairs.len()
        )));
    }
    let values: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| pair_metric(a, b, metric))
        .collect::<Result<_>>()?;
    if values.iter().all(|v| *v == values[0]) {
        return z_test(values[0], 0.0, values.len(), metric);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    z_test(mean, var.sqrt(), values.len(), metric)
}

/// Mean pairwise cosine within and across groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSimilarity {
    pub intra: f64,
    pub inter: f64,
}

pub fn group_similarity(emb: &[Vec<f64>], labels: &[usize]) -> Result<GroupSimilarity> {
    check_embeddings(emb, labels)?;
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..emb.len() {
        for j in (i + 1)..emb.len() {
            let c = cosine(&emb[i], &emb[j]);
            if labels[i] == labels[j] {
                si += c;
                ni += 1;
            } else {
                so += c;
                no += 1;
            }
        }
    }
    if ni == 0 || no == 0 {
        return Err(CalmError::Input("need both same-group and cross-group pairs".into()));
    }
    Ok(GroupSimilarity {
        intra: si / ni as f64,
        inter: so / no as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub knn_k: usize,
    /// Share of the test split used to fit the linear probe.
    pub linear_train_fraction: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            knn_k: 5,
            linear_train_fraction: 0.8,
            seed: 7,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.knn_k == 0 {
            return Err(CalmError::Config("eval.knn_k must be >= 1".into()));
        }
        if !(self.linear_train_fraction > 0.0 && self.linear_train_fraction < 1.0) {
            return Err(CalmError::Config("eval.linear_train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSimilarity {
    pub explicit: GroupSimilarity,
    pub latent: GroupSimilarity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// k-NN culture probe on refined embeddings.
    pub probe: ProbeResult,
    pub linear_probe: ProbeResult,
    pub culture_similarity: ChannelSimilarity,
    /// Task macro-F1 of the reflected predictions.
    pub macro_f1: f64,
    pub task_accuracy: f64,
    pub p_m: f64,
    pub ooc: f64,
    pub correction_rate: f64,
    pub examples: usize,
    pub routing_stats: RoutingStats,
}

/// Refined embeddings of `examples`.
pub fn embed_all(model: &CalmModel, params: &Params, examples: &[&Example]) -> Result<Vec<Vec<f64>>> {
    examples.iter().map(|e| model.embed(params, &e.tokens)).collect()
}

/// k-NN culture probe on the refined embeddings of `examples`.
pub fn knn_culture_accuracy(model: &CalmModel, params: &Params, examples: &[&Example], k: usize) -> Result<f64> {
    let emb = embed_all(model, params, examples)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.culture_id).collect();
    Ok(knn_probe(&emb, &labels, k)?.acc)
}

/// Marks the first `fraction` of each label's occurrences (at least one,
/// and all but one when the label occurs twice or more).
fn stratified_mask(labels: &[usize], fraction: f64) -> Vec<bool> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let quota: BTreeMap<usize, usize> = counts
        .iter()
        .map(|(&l, &n)| (l, ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1))))
        .collect();
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            let s = seen.entry(*l).or_default();
            *s += 1;
            *s <= quota[l]
        })
        .collect()
}

/// Full report over `examples` (normally the test split).
pub fn evaluate(
    model: &CalmModel,
    params: &Params,
    examples: &[&Example],
    routing_stats: RoutingStats,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    opts.validate()?;
    let emb = embed_all(model, params, examples)?;
    let cultures: Vec<usize> = examples.iter().map(|e| e.culture_id).collect();
    let probe = knn_probe(&emb, &cultures, opts.knn_k)?;

    let in_probe_train = stratified_mask(&cultures, opts.linear_train_fraction);
    let pick = |train: bool| -> (Vec<Vec<f64>>, Vec<usize>) {
        (0..emb.len())
            .filter(|&i| in_probe_train[i] == train)
            .map(|i| (emb[i].clone(), cultures[i]))
            .unzip()
    };
    let (tr_e, tr_l) = pick(true);
    let (te_e, te_l) = pick(false);
    let linear_probe = linear_probe(&tr_e, &tr_l, &te_e, &te_l)?;

    let half = emb.first().map_or(0, |e| e.len() / 2);
    let ex: Vec<Vec<f64>> = emb.iter().map(|e| e[..half].to_vec()).collect();
    let la: Vec<Vec<f64>> = emb.iter().map(|e| e[half..].to_vec()).collect();
    let culture_similarity = ChannelSimilarity {
        explicit: group_similarity(&ex, &cultures)?,
        latent: group_similarity(&la, &cultures)?,
    };

    let mut preds = Vec::with_capacity(examples.len());
    let mut corrections = 0usize;
    for (i, e) in examples.iter().enumerate() {
        let t = model.reflect(params, &e.tokens, crate::model::sub_seed(opts.seed, &format!("eval{i}")))?;
        corrections += t.corrections();
        preds.push(t.final_output.label);
    }
    let task_labels: Vec<usize> = examples.iter().map(|e| e.task_label).collect();
    let valid: BTreeSet<usize> = (0..model.config.task_labels).collect();
    let binary: Vec<u8> = preds.iter().map(|&p| u8::from(p == 1)).collect();
    Ok(EvalReport {
        probe,
        linear_probe,
        culture_similarity,
        macro_f1: macro_f1(&preds, &task_labels)?,
        task_accuracy: accuracy(&preds, &task_labels),
        p_m: stereotype_rate(&binary)?,
        ooc: ooc_rate(&preds, &valid)?,
        correction_rate: corrections as f64 / examples.len().max(1) as f64,
        examples: examples.len(),
        routing_stats,
    })
}
