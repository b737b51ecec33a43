//! One reflective pass through an untrained model, with the input's own
//! identity and with an identity borrowed from another culture.

use calm::corpus::{generate_corpus, CorpusSpec};
use calm::model::{CalmModel, ModelConfig};

fn main() -> calm::error::Result<()> {
    let corpus = generate_corpus(&CorpusSpec::default())?;
    let (model, params) = CalmModel::build(&ModelConfig::desk(), 7)?;
    let ex = &corpus[0];
    let other = corpus.iter().find(|e| e.culture_id != ex.culture_id).expect("two cultures");

    let own = model.reflect(&params, &ex.tokens, 1)?;
    let swapped = model.reflect_with_identity(&params, &ex.tokens, &other.tokens, 1)?;
    for (name, t) in [("own identity", &own), ("swapped identity", &swapped)] {
        println!(
            "{name}: delta {:.4}, corrected {}, raw label {}, final label {}, revised delta {:?}",
            t.delta, t.corrected, t.raw_output.label, t.final_output.label, t.revised_delta
        );
    }
    println!("threshold {}", model.config.reflect.calibration.threshold);
    Ok(())
}
