//! NT-Xent on hand-made embeddings, then the batched window loss of an
//! untrained model on a sampled contrastive batch.

use calm::autograd::Graph;
use calm::contrastive::{nt_xent, Channel, ProjectedEmbedding};
use calm::corpus::{generate_corpus, sample_contrastive_batch, CorpusSpec};
use calm::model::{CalmModel, ModelConfig, Stage, StepOptions};

fn main() -> calm::error::Result<()> {
    let e = |v: &[f64], c| ProjectedEmbedding::new(v, Channel::Explicit, c);
    let anchor = e(&[1.0, 0.1, 0.0], 0)?;
    let positive = e(&[0.9, 0.2, 0.0], 0)?;
    let negatives = [e(&[0.0, 1.0, 0.0], 1)?, e(&[0.0, 0.0, 1.0], 2)?];
    for tau in [0.07, 0.5, 1.0] {
        println!("tau {tau}: loss {:.6}", nt_xent(&anchor, &positive, &negatives, tau)?);
    }

    let corpus = generate_corpus(&CorpusSpec::default())?;
    let cfg = ModelConfig::desk();
    let (model, params) = CalmModel::build(&cfg, 7)?;
    let batch = sample_contrastive_batch(&corpus, 16, 3)?;
    let anchors: Vec<_> = batch.anchors.iter().collect();
    let positives: Vec<_> = batch.positives.iter().collect();
    let mut g = Graph::new(&params);
    let opts = StepOptions {
        stage: Stage::Contrastive,
        ..StepOptions::eval(1, 1.0)
    };
    let f = model.forward_batch(&mut g, &anchors, &positives, &opts)?;
    println!(
        "window at init: explicit {:.4}, latent {:.4}, total {:.4}",
        g.scalar(f.window_explicit),
        g.scalar(f.window_latent),
        g.scalar(f.terms.window)
    );
    Ok(())
}
