//! Synthetic multi-culture corpus with ground-truth cultural signal.
//!
//! Every culture owns a disjoint range of *marker* tokens (the explicit
//! channel) and a vector of style controls (the latent channel): a mean
//! sequence length plus the rates at which shared formality and
//! indirectness token classes appear. Task labels are drawn independently
//! of culture and are carried by topic-band tokens.
//!
//! Vocabulary layout, in order:
//!
//! | ids | role |
//! |-----|------|
//! | 0 | padding (never emitted) |
//! | 1 | mask |
//! | `STYLE_CLASS_SIZE` ids | formality class |
//! | `STYLE_CLASS_SIZE` ids | indirectness class |
//! | `num_cultures × marker_vocab_per_culture` ids | marker ranges |
//! | rest | content: one topic band per task label, then filler |

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CalmError, Result};

pub const PAD_TOKEN: usize = 0;
pub const MASK_TOKEN: usize = 1;
pub const STYLE_CLASS_SIZE: usize = 6;
const RESERVED: usize = 2;
/// Probability that a content position draws from the task's topic band.
const TOPIC_RATE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleParams {
    pub mean_length: f64,
    pub formality_rate: f64,
    pub indirectness_rate: f64,
}

impl StyleParams {
    fn as_array(&self) -> [f64; 3] {
        [self.mean_length, self.formality_rate, self.indirectness_rate]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_cultures: usize,
    pub num_examples: usize,
    pub vocab_size: usize,
    pub marker_vocab_per_culture: usize,
    pub marker_insert_prob: f64,
    /// One entry per culture; derived from the seed when empty.
    #[serde(default)]
    pub style_params_per_culture: Vec<StyleParams>,
    pub task_label_count: usize,
    pub sequence_length_range: [usize; 2],
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_cultures: 8,
            num_examples: 4000,
            vocab_size: 1280,
            marker_vocab_per_culture: 128,
            marker_insert_prob: 0.3,
            style_params_per_culture: Vec::new(),
            task_label_count: 4,
            sequence_length_range: [16, 32],
            seed: 7,
        }
    }
}

/// Resolved vocabulary layout for a spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub formality: Range<usize>,
    pub indirectness: Range<usize>,
    pub markers_start: usize,
    pub marker_vocab_per_culture: usize,
    pub num_cultures: usize,
    pub topic_band: usize,
    pub topics_start: usize,
    pub filler: Range<usize>,
    pub size: usize,
}

impl Vocabulary {
    pub fn marker_range(&self, culture: usize) -> Range<usize> {
        let start = self.markers_start + culture * self.marker_vocab_per_culture;
        start..start + self.marker_vocab_per_culture
    }

    pub fn topic_range(&self, label: usize) -> Range<usize> {
        let start = self.topics_start + label * self.topic_band;
        start..start + self.topic_band
    }

    /// Culture owning `token` as a marker, if any.
    pub fn marker_culture(&self, token: usize) -> Option<usize> {
        let end = self.markers_start + self.num_cultures * self.marker_vocab_per_culture;
        (self.markers_start..end)
            .contains(&token)
            .then(|| (token - self.markers_start) / self.marker_vocab_per_culture)
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(CalmError::Config(m));
        if self.num_cultures < 2 {
            return cfg(format!("num_cultures must be >= 2, got {}", self.num_cultures));
        }
        if self.marker_vocab_per_culture == 0 {
            return cfg("marker_vocab_per_culture must be positive".into());
        }
        if self.task_label_count == 0 {
            return cfg("task_label_count must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.marker_insert_prob) {
            return cfg(format!(
                "marker_insert_prob must lie in [0, 1], got {}",
                self.marker_insert_prob
            ));
        }
        let [lo, hi] = self.sequence_length_range;
        if lo == 0 || lo > hi {
            return cfg(format!("invalid sequence_length_range [{lo}, {hi}]"));
        }
        self.vocabulary()?;
        if !self.style_params_per_culture.is_empty() {
            if self.style_params_per_culture.len() != self.num_cultures {
                return cfg(format!(
                    "style_params_per_culture has {} entries for {} cultures",
                    self.style_params_per_culture.len(),
                    self.num_cultures
                ));
            }
            for (c, s) in self.style_params_per_culture.iter().enumerate() {
                let rates_ok = (0.0..=1.0).contains(&s.formality_rate)
                    && (0.0..=1.0).contains(&s.indirectness_rate)
                    && s.formality_rate + s.indirectness_rate <= 1.0;
                if !rates_ok || !s.mean_length.is_finite() || s.mean_length <= 0.0 {
                    return cfg(format!("style params of culture {c} out of bounds"));
                }
            }
            check_distinct_styles(&self.style_params_per_culture)?;
        }
        Ok(())
    }

    /// Vocabulary layout; fails when the marker ranges cannot be kept
    /// disjoint inside `vocab_size`.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let markers_start = RESERVED + 2 * STYLE_CLASS_SIZE;
        let markers_end = markers_start + self.num_cultures * self.marker_vocab_per_culture;
        let content = self.vocab_size.saturating_sub(markers_end);
        let needed = 2 * self.task_label_count;
        if self.vocab_size < markers_end || content < needed {
            return Err(CalmError::Config(format!(
                "vocab_size {} cannot hold {} disjoint marker ranges of {} plus {} content tokens",
                self.vocab_size, self.num_cultures, self.marker_vocab_per_culture, needed
            )));
        }
        let topic_band = (content / (2 * self.task_label_count)).max(1);
        let topics_start = markers_end;
        let filler_start = topics_start + topic_band * self.task_label_count;
        Ok(Vocabulary {
            formality: RESERVED..RESERVED + STYLE_CLASS_SIZE,
            indirectness: RESERVED + STYLE_CLASS_SIZE..markers_start,
            markers_start,
            marker_vocab_per_culture: self.marker_vocab_per_culture,
            num_cultures: self.num_cultures,
            topic_band,
            topics_start,
            filler: filler_start..self.vocab_size,
            size: self.vocab_size,
        })
    }

    /// Style parameters per culture: the configured ones, or a seeded draw.
    pub fn resolved_styles(&self) -> Result<Vec<StyleParams>> {
        if !self.style_params_per_culture.is_empty() {
            return Ok(self.style_params_per_culture.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5717_e000);
        let [lo, hi] = self.sequence_length_range;
        let mid = (lo + hi) as f64 / 2.0;
        let spread = (hi - lo) as f64 / 5.0;
        let styles: Vec<StyleParams> = (0..self.num_cultures)
            .map(|_| StyleParams {
                mean_length: mid + rng.random_range(-spread..=spread),
                formality_rate: rng.random_range(0.02..0.2),
                indirectness_rate: rng.random_range(0.02..0.2),
            })
            .collect();
        check_distinct_styles(&styles)?;
        Ok(styles)
    }
}

fn check_distinct_styles(styles: &[StyleParams]) -> Result<()> {
    for i in 0..styles.len() {
        for j in i + 1..styles.len() {
            if styles[i].as_array() == styles[j].as_array() {
                return Err(CalmError::Config(format!(
                    "cultures {i} and {j} have identical style parameters"
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub culture_id: usize,
    /// Realized `[length, formality rate, indirectness rate]`.
    pub style_vector: Vec<f64>,
    pub task_label: usize,
    #[serde(rename = "marker_positions")]
    pub explicit_marker_positions: Vec<usize>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Generate a corpus. Pure function of the spec.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    let vocab = spec.vocabulary()?;
    let styles = spec.resolved_styles()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [lo, hi] = spec.sequence_length_range;
    let length_noise = Normal::new(0.0, 2.0).expect("finite");
    let rate_noise = Normal::new(0.0, 0.02).expect("finite");

    let mut corpus = Vec::with_capacity(spec.num_examples);
    for i in 0..spec.num_examples {
        let culture = i % spec.num_cultures;
        let style = &styles[culture];
        let task_label = rng.random_range(0..spec.task_label_count);
        let len = (style.mean_length + length_noise.sample(&mut rng))
            .round()
            .clamp(lo as f64, hi as f64) as usize;
        let formality = (style.formality_rate + rate_noise.sample(&mut rng)).clamp(0.0, 0.5);
        let indirectness = (style.indirectness_rate + rate_noise.sample(&mut rng)).clamp(0.0, 0.5);

        let markers = vocab.marker_range(culture);
        let topic = vocab.topic_range(task_label);
        let mut tokens = Vec::with_capacity(len);
        let mut marker_positions = Vec::new();
        for pos in 0..len {
            let tok = if rng.random::<f64>() < spec.marker_insert_prob {
                marker_positions.push(pos);
                rng.random_range(markers.clone())
            } else {
                let u: f64 = rng.random();
                if u < formality {
                    rng.random_range(vocab.formality.clone())
                } else if u < formality + indirectness {
                    rng.random_range(vocab.indirectness.clone())
                } else if vocab.filler.is_empty() || rng.random::<f64>() < TOPIC_RATE {
                    rng.random_range(topic.clone())
                } else {
                    rng.random_range(vocab.filler.clone())
                }
            };
            tokens.push(tok);
        }
        corpus.push(Example {
            tokens,
            culture_id: culture,
            style_vector: vec![len as f64, formality, indirectness],
            task_label,
            explicit_marker_positions: marker_positions,
        });
    }
    corpus.shuffle(&mut rng);
    Ok(corpus)
}

/// Anchor/positive pairs with in-batch negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub anchors: Vec<Example>,
    pub positives: Vec<Example>,
    pub culture_ids: Vec<usize>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Anchors followed by positives, the member order used for negatives.
    pub fn members(&self) -> impl Iterator<Item = &Example> {
        self.anchors.iter().chain(self.positives.iter())
    }

    /// Checks the pairing and negative-availability invariants.
    pub fn check(&self) -> Result<()> {
        if self.anchors.len() != self.positives.len() || self.anchors.len() != self.culture_ids.len()
        {
            return Err(CalmError::Contract("batch lists differ in length".into()));
        }
        for (i, (a, p)) in self.anchors.iter().zip(&self.positives).enumerate() {
            if a.culture_id != p.culture_id || a.culture_id != self.culture_ids[i] {
                return Err(CalmError::Contract(format!("pair {i} crosses cultures")));
            }
            if !self.members().any(|m| m.culture_id != a.culture_id) {
                return Err(CalmError::Contract(format!("anchor {i} has no negative")));
            }
        }
        Ok(())
    }
}

/// Sample `batch_size` anchors, each paired with a distinct same-culture
/// positive (same task label when one exists). At least two cultures are
/// always present, so every anchor has an in-batch negative.
pub fn sample_contrastive_batch(
    corpus: &[Example],
    batch_size: usize,
    seed: u64,
) -> Result<ContrastiveBatch> {
    let (anchors, positives) = sample_pair_indices(corpus, batch_size, seed)?;
    let batch = ContrastiveBatch {
        culture_ids: anchors.iter().map(|&i| corpus[i].culture_id).collect(),
        anchors: anchors.iter().map(|&i| corpus[i].clone()).collect(),
        positives: positives.iter().map(|&i| corpus[i].clone()).collect(),
    };
    Ok(batch)
}

/// Index form of [`sample_contrastive_batch`].
pub fn sample_pair_indices(
    corpus: &[Example],
    batch_size: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if batch_size < 2 {
        return Err(CalmError::Sampling(
            "batch_size must be >= 2 to guarantee in-batch negatives".into(),
        ));
    }
    let mut by_culture: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut by_culture_task: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, ex) in corpus.iter().enumerate() {
        by_culture.entry(ex.culture_id).or_default().push(i);
        by_culture_task
            .entry((ex.culture_id, ex.task_label))
            .or_default()
            .push(i);
    }
    let eligible: Vec<usize> = corpus
        .iter()
        .enumerate()
        .filter(|(_, ex)| by_culture[&ex.culture_id].len() >= 2)
        .map(|(i, _)| i)
        .collect();
    let eligible_cultures = by_culture.values().filter(|v| v.len() >= 2).count();
    if eligible_cultures < 2 {
        return Err(CalmError::Sampling(
            "need at least two cultures with two or more examples each".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anchors: Vec<usize> = if batch_size <= eligible.len() {
        let mut pool = eligible.clone();
        let (picked, _) = pool.partial_shuffle(&mut rng, batch_size);
        picked.to_vec()
    } else {
        (0..batch_size)
            .map(|_| eligible[rng.random_range(0..eligible.len())])
            .collect()
    };
    let first = corpus[anchors[0]].culture_id;
    if anchors.iter().all(|&i| corpus[i].culture_id == first) {
        let others: Vec<usize> = eligible
            .iter()
            .copied()
            .filter(|&i| corpus[i].culture_id != first)
            .collect();
        let last = anchors.len() - 1;
        anchors[last] = others[rng.random_range(0..others.len())];
    }

    let positives = anchors
        .iter()
        .map(|&a| {
            let ex = &corpus[a];
            let same_task: Vec<usize> = by_culture_task[&(ex.culture_id, ex.task_label)]
                .iter()
                .copied()
                .filter(|&i| i != a)
                .collect();
            let pool = if same_task.is_empty() {
                by_culture[&ex.culture_id]
                    .iter()
                    .copied()
                    .filter(|&i| i != a)
                    .collect()
            } else {
                same_task
            };
            pool[rng.random_range(0..pool.len())]
        })
        .collect();
    Ok((anchors, positives))
}

/// Culture-stratified split into train/val/test, each in corpus order.
pub fn split(
    corpus: &[Example],
    ratios: [f64; 3],
) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>)> {
    let [a, b, c] = split_indices(corpus, ratios)?;
    let take = |ix: &[usize]| ix.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
    Ok((take(&a), take(&b), take(&c)))
}

/// Index form of [`split`].
///
/// Each split's total size is the largest-remainder rounding of
/// `len × ratio`; per-culture counts are within one of the culture's
/// proportional share.
pub fn split_indices(corpus: &[Example], ratios: [f64; 3]) -> Result<[Vec<usize>; 3]> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(CalmError::Config(format!("split ratios out of [0, 1]: {ratios:?}")));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CalmError::Config(format!("split ratios must sum to 1: {ratios:?}")));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in corpus.iter().enumerate() {
        groups.entry(ex.culture_id).or_default().push(i);
    }
    let totals = largest_remainder(corpus.len(), &ratios);

    // Floors per (culture, split), then hand out the remaining units by
    // descending remainder while both the culture and the split need them.
    let cultures: Vec<usize> = groups.keys().copied().collect();
    let mut quota: Vec<[usize; 3]> = Vec::with_capacity(cultures.len());
    let mut cells: Vec<(f64, usize, usize)> = Vec::new();
    for (ci, c) in cultures.iter().enumerate() {
        let n = groups[c].len() as f64;
        let mut q = [0usize; 3];
        for s in 0..3 {
            let ideal = n * ratios[s];
            q[s] = ideal.floor() as usize;
            if ratios[s] > 0.0 {
                cells.push((ideal - ideal.floor(), ci, s));
            }
        }
        quota.push(q);
    }
    let mut culture_need: Vec<usize> = cultures
        .iter()
        .enumerate()
        .map(|(ci, c)| groups[c].len() - quota[ci].iter().sum::<usize>())
        .collect();
    let mut split_need: [isize; 3] = [0; 3];
    for s in 0..3 {
        split_need[s] = totals[s] as isize - quota.iter().map(|q| q[s]).sum::<usize>() as isize;
    }
    cells.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used = vec![[false; 3]; cultures.len()];
    for &(_, ci, s) in &cells {
        if culture_need[ci] > 0 && split_need[s] > 0 {
            quota[ci][s] += 1;
            used[ci][s] = true;
            culture_need[ci] -= 1;
            split_need[s] -= 1;
        }
    }
    // Rare leftovers: place them in the culture's best unused cell.
    for &(_, ci, s) in &cells {
        if culture_need[ci] > 0 && !used[ci][s] {
            quota[ci][s] += 1;
            used[ci][s] = true;
            culture_need[ci] -= 1;
        }
    }

    let mut out: [Vec<usize>; 3] = Default::default();
    for (ci, c) in cultures.iter().enumerate() {
        let members = &groups[c];
        let mut offset = 0;
        for s in 0..3 {
            out[s].extend_from_slice(&members[offset..offset + quota[ci][s]]);
            offset += quota[ci][s];
        }
    }
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}

fn largest_remainder(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let mut out = [0usize; 3];
    let mut rem: Vec<(f64, usize)> = Vec::new();
    for s in 0..3 {
        let ideal = n as f64 * ratios[s];
        out[s] = ideal.floor() as usize;
        rem.push((ideal - ideal.floor(), s));
    }
    let mut left = n - out.iter().sum::<usize>();
    rem.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, s) in &rem {
        if left == 0 {
            break;
        }
        if ratios[s] > 0.0 {
            out[s] += 1;
            left -= 1;
        }
    }
    out
}

pub fn write_jsonl<W: Write>(mut w: W, corpus: &[Example]) -> Result<()> {
    for ex in corpus {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line)
            .map_err(|e| CalmError::Input(format!("corpus line {}: {e}", lineno + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

/// Checks an example against the vocabulary: marker positions hold the
/// culture's markers and every id is in range.
pub fn check_example(ex: &Example, vocab: &Vocabulary) -> Result<()> {
    if let Some(t) = ex.tokens.iter().find(|&&t| t >= vocab.size) {
        return Err(CalmError::Input(format!("token {t} outside vocabulary")));
    }
    let range = vocab.marker_range(ex.culture_id);
    for &p in &ex.explicit_marker_positions {
        match ex.tokens.get(p) {
            Some(t) if range.contains(t) => {}
            _ => {
                return Err(CalmError::Input(format!(
                    "marker position {p} does not hold a culture {} marker",
                    ex.culture_id
                )))
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(num_cultures: usize, num_examples: usize, seed: u64) -> CorpusSpec {
        CorpusSpec {
            num_cultures,
            num_examples,
            vocab_size: 400,
            marker_vocab_per_culture: 12,
            marker_insert_prob: 0.3,
            style_params_per_culture: Vec::new(),
            task_label_count: 3,
            sequence_length_range: [8, 20],
            seed,
        }
    }

    fn to_bytes(corpus: &[Example]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, corpus).unwrap();
        buf
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let spec = small_spec(2, 100, 7);
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(to_bytes(&a), to_bytes(&b));
        let other = generate_corpus(&small_spec(2, 100, 8)).unwrap();
        assert_ne!(to_bytes(&a), to_bytes(&other));
    }

    #[test]
    fn zero_insert_probability_means_no_markers() {
        let mut spec = small_spec(3, 200, 1);
        spec.marker_insert_prob = 0.0;
        let vocab = spec.vocabulary().unwrap();
        for ex in generate_corpus(&spec).unwrap() {
            assert!(ex.explicit_marker_positions.is_empty());
            assert!(ex.tokens.iter().all(|&t| vocab.marker_culture(t).is_none()));
        }
    }

    #[test]
    fn examples_satisfy_invariants_and_balance() {
        let spec = small_spec(5, 1000, 3);
        let vocab = spec.vocabulary().unwrap();
        let corpus = generate_corpus(&spec).unwrap();
        let mut counts = vec![0usize; 5];
        for ex in &corpus {
            check_example(ex, &vocab).unwrap();
            counts[ex.culture_id] += 1;
            let [lo, hi] = spec.sequence_length_range;
            assert!((lo..=hi).contains(&ex.len()));
        }
        for c in counts {
            assert!((c as f64 - 200.0).abs() <= 20.0);
        }
    }

    #[test]
    fn invalid_specs_are_configuration_errors() {
        let mut spec = small_spec(1, 10, 0);
        assert!(matches!(generate_corpus(&spec), Err(CalmError::Config(_))));
        spec = small_spec(4, 10, 0);
        spec.vocab_size = 40;
        assert!(matches!(generate_corpus(&spec), Err(CalmError::Config(_))));
        spec = small_spec(2, 10, 0);
        let s = StyleParams {
            mean_length: 10.0,
            formality_rate: 0.1,
            indirectness_rate: 0.1,
        };
        spec.style_params_per_culture = vec![s.clone(), s];
        assert!(matches!(generate_corpus(&spec), Err(CalmError::Config(_))));
    }

    #[test]
    fn jsonl_uses_marker_positions_field() {
        let corpus = generate_corpus(&small_spec(2, 3, 1)).unwrap();
        let text = String::from_utf8(to_bytes(&corpus)).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["tokens", "culture_id", "style_vector", "task_label", "marker_positions"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert_eq!(read_jsonl(text.as_bytes()).unwrap(), corpus);
    }

    #[test]
    fn tiny_corpus_pairs_with_the_only_partner() {
        let ex = |c: usize, t: usize| Example {
            tokens: vec![2 + t],
            culture_id: c,
            style_vector: vec![1.0, 0.0, 0.0],
            task_label: 0,
            explicit_marker_positions: vec![],
        };
        let corpus = vec![ex(0, 0), ex(1, 1), ex(0, 2), ex(1, 3)];
        for seed in 0..20 {
            let (a, p) = sample_pair_indices(&corpus, 2, seed).unwrap();
            assert_ne!(corpus[a[0]].culture_id, corpus[a[1]].culture_id);
            for (ai, pi) in a.iter().zip(&p) {
                assert_eq!(*pi, [2, 3, 0, 1][*ai]);
            }
        }
    }

    #[test]
    fn single_culture_cannot_be_sampled() {
        let corpus: Vec<Example> = generate_corpus(&small_spec(2, 20, 0))
            .unwrap()
            .into_iter()
            .filter(|e| e.culture_id == 0)
            .collect();
        assert!(matches!(
            sample_contrastive_batch(&corpus, 4, 0),
            Err(CalmError::Sampling(_))
        ));
    }

    #[test]
    fn batches_are_deterministic_and_valid() {
        let corpus = generate_corpus(&small_spec(8, 800, 2)).unwrap();
        let a = sample_contrastive_batch(&corpus, 64, 11).unwrap();
        let b = sample_contrastive_batch(&corpus, 64, 11).unwrap();
        assert_eq!(a, b);
        a.check().unwrap();
        let (ai, pi) = sample_pair_indices(&corpus, 64, 11).unwrap();
        assert!(ai.iter().zip(&pi).all(|(x, y)| x != y));
    }

    #[test]
    fn split_edge_cases() {
        let corpus = generate_corpus(&small_spec(2, 100, 5)).unwrap();
        let (tr, va, te) = split(&corpus, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(tr, corpus);
        assert!(va.is_empty() && te.is_empty());
        let (tr, va, te) = split(&corpus, [0.8, 0.1, 0.1]).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        assert!(matches!(split(&corpus, [0.5, 0.2, 0.2]), Err(CalmError::Config(_))));
    }
}
