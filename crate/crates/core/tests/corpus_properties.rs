use std::collections::BTreeSet;

use calm::corpus::{
    check_example, generate_corpus, read_jsonl, sample_contrastive_batch, split_indices, write_jsonl, CorpusSpec,
};
use proptest::prelude::*;

fn spec_strategy() -> impl Strategy<Value = CorpusSpec> {
    (2usize..6, 20usize..120, 4usize..16, 0.05f64..0.5, 2usize..5, any::<u64>()).prop_map(
        |(cultures, n, mv, p, labels, seed)| CorpusSpec {
            num_cultures: cultures,
            num_examples: n.max(2 * cultures),
            vocab_size: 400,
            marker_vocab_per_culture: mv,
            marker_insert_prob: p,
            task_label_count: labels,
            sequence_length_range: [6, 14],
            seed,
            ..CorpusSpec::default()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn generated_examples_are_valid(spec in spec_strategy()) {
        let corpus = generate_corpus(&spec).unwrap();
        let vocab = spec.vocabulary().unwrap();
        prop_assert_eq!(corpus.len(), spec.num_examples);
        for ex in &corpus {
            check_example(ex, &vocab).unwrap();
            prop_assert!(ex.culture_id < spec.num_cultures);
            prop_assert!(ex.task_label < spec.task_label_count);
            let [lo, hi] = spec.sequence_length_range;
            prop_assert!((lo..=hi).contains(&ex.tokens.len()));
            // Marker tokens appear exactly at the recorded positions.
            for (pos, tok) in ex.tokens.iter().enumerate() {
                let marked = ex.explicit_marker_positions.contains(&pos);
                prop_assert_eq!(vocab.marker_culture(*tok).is_some(), marked);
            }
        }
    }

    #[test]
    fn generation_is_seed_deterministic(spec in spec_strategy()) {
        prop_assert_eq!(generate_corpus(&spec).unwrap(), generate_corpus(&spec).unwrap());
    }

    #[test]
    fn splits_partition_the_corpus(spec in spec_strategy(), a in 0.3f64..0.8, b in 0.0f64..0.2) {
        let corpus = generate_corpus(&spec).unwrap();
        let ratios = [a, b, 1.0 - a - b];
        let parts = split_indices(&corpus, ratios).unwrap();
        let mut seen = BTreeSet::new();
        for part in &parts {
            for &i in part {
                prop_assert!(seen.insert(i), "index {} in two splits", i);
            }
        }
        prop_assert_eq!(seen.len(), corpus.len());
    }

    #[test]
    fn contrastive_batches_pair_within_culture(spec in spec_strategy(), b in 2usize..24, seed in any::<u64>()) {
        let corpus = generate_corpus(&spec).unwrap();
        let batch = sample_contrastive_batch(&corpus, b, seed).unwrap();
        prop_assert_eq!(batch.len(), b);
        batch.check().unwrap();
        for (a, p) in batch.anchors.iter().zip(&batch.positives) {
            prop_assert_eq!(a.culture_id, p.culture_id);
        }
    }

    #[test]
    fn jsonl_round_trip(spec in spec_strategy()) {
        let corpus = generate_corpus(&spec).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &corpus).unwrap();
        prop_assert_eq!(read_jsonl(buf.as_slice()).unwrap(), corpus);
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        CorpusSpec {
            num_cultures: 1,
            ..CorpusSpec::default()
        },
        CorpusSpec {
            marker_insert_prob: 1.5,
            ..CorpusSpec::default()
        },
        CorpusSpec {
            sequence_length_range: [20, 10],
            ..CorpusSpec::default()
        },
        CorpusSpec {
            vocab_size: 50,
            ..CorpusSpec::default()
        },
    ];
    for spec in bad {
        assert!(generate_corpus(&spec).is_err(), "{spec:?}");
    }
}

#[test]
fn corrupted_jsonl_reports_the_line() {
    let err = read_jsonl("{\"tokens\": [1]}\n".as_bytes()).unwrap_err();
    assert!(err.to_string().contains("line 1"), "{err}");
}
