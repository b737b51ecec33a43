//! Generates the default synthetic corpus and prints its layout and signal.

use std::collections::BTreeMap;

use calm::corpus::{generate_corpus, split, CorpusSpec};

fn main() -> calm::error::Result<()> {
    let spec = CorpusSpec::default();
    let vocab = spec.vocabulary()?;
    let corpus = generate_corpus(&spec)?;
    println!("{} examples, vocabulary of {}", corpus.len(), vocab.size);
    for (c, s) in spec.resolved_styles()?.iter().enumerate() {
        println!(
            "culture {c}: markers {:?}, mean length {:.1}, formality {:.3}, indirectness {:.3}",
            vocab.marker_range(c),
            s.mean_length,
            s.formality_rate,
            s.indirectness_rate
        );
    }

    let mut markers: BTreeMap<usize, usize> = BTreeMap::new();
    for ex in &corpus {
        *markers.entry(ex.explicit_marker_positions.len()).or_default() += 1;
    }
    println!("markers per example: {markers:?}");

    let (train, val, test) = split(&corpus, [0.8, 0.1, 0.1])?;
    println!("split sizes: {} / {} / {}", train.len(), val.len(), test.len());
    println!("first example: {}", serde_json::to_string(&corpus[0])?);
    Ok(())
}
