//! Trains the desk-scale model and prints per-epoch probe losses and the
//! final culture probe. Usage: `train_desk [epochs] [out_dir]`; with an
//! output directory, metrics and plots are written there.

use calm::config::RunConfig;
use calm::corpus::{generate_corpus, Example};
use calm::eval::{embed_all, knn_culture_accuracy};
use calm::plots::{emit_plots, EmbeddingDump, EMBEDDINGS_FILE, METRICS_FILE, ROUTING_FILE};
use calm::train::train_with;

fn main() -> calm::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::desk();
    if let Some(e) = args.next() {
        cfg.train.epochs = e.parse().map_err(|_| calm::error::CalmError::Config(format!("bad epoch count {e}")))?;
    }
    let out = args.next().map(std::path::PathBuf::from);
    let corpus = generate_corpus(&cfg.corpus)?;
    let start = std::time::Instant::now();
    let outcome = train_with(&cfg.model, &cfg.train, &corpus, |m| {
        println!(
            "epoch {:2}: window {:.4} (explicit {:.4}, latent {:.4}), task {:.4}, identity {:.4}, lr {:.2e}, {:.0?}",
            m.epoch,
            m.probe.window,
            m.probe_window_explicit,
            m.probe_window_latent,
            m.probe.task,
            m.probe.identity,
            m.learning_rate,
            start.elapsed()
        );
    })?;
    let test: Vec<&Example> = outcome.splits[2].iter().map(|&i| &corpus[i]).collect();
    let acc = knn_culture_accuracy(&outcome.model, &outcome.params, &test, cfg.eval.knn_k)?;
    println!("test k-NN culture accuracy {acc:.3}");

    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(&outcome.history)?)?;
        std::fs::write(dir.join(ROUTING_FILE), serde_json::to_string_pretty(&outcome.routing)?)?;
        let dump = EmbeddingDump {
            culture_ids: test.iter().map(|e| e.culture_id).collect(),
            embeddings: embed_all(&outcome.model, &outcome.params, &test)?,
        };
        std::fs::write(dir.join(EMBEDDINGS_FILE), serde_json::to_string(&dump)?)?;
        let files = emit_plots(&dir, &dir.join("plots"))?;
        for p in files.csv.iter().chain(&files.svg) {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}
