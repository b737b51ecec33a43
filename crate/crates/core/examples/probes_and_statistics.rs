//! Embedding probes and the significance statistics used in reports.

use calm::eval::{attribution_similarity, knn_probe, linear_probe, z_test, SimilarityMetric};

fn main() -> calm::error::Result<()> {
    let emb: Vec<Vec<f64>> = (0..30)
        .map(|i| {
            let c = i % 3;
            let a = c as f64 * 2.1 + (i as f64 * 0.37).sin() * 0.3;
            vec![a.cos(), a.sin(), 0.1 * (i as f64).cos()]
        })
        .collect();
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let knn = knn_probe(&emb, &labels, 5)?;
    println!("k-NN: acc {:.3}, macro-F1 {:.3}, acc@k {:?}", knn.acc, knn.f1_macro, knn.acc_at);
    let lin = linear_probe(&emb[..24], &labels[..24], &emb[24..], &labels[24..])?;
    println!("linear: acc {:.3}, macro-F1 {:.3}", lin.acc, lin.f1_macro);

    let s = z_test(0.672, 0.251, 1000, SimilarityMetric::Cosine)?;
    println!("cosine mean 0.672, std 0.251, n 1000: z {:.3}, p {:.3e}", s.z, s.p);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = emb.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect();
    for m in [SimilarityMetric::Cosine, SimilarityMetric::Pearson, SimilarityMetric::Js] {
        let s = attribution_similarity(&pairs, m)?;
        println!("{m:?}: mean {:.4}, std {:.4}, z {:.3}, p {:.3e}", s.mean, s.std, s.z, s.p);
    }
    Ok(())
}
