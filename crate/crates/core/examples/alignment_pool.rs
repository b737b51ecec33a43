//! The identity alignment pool on random refined tokens: clustering,
//! cross-attention, routed experts and residual fusion.

use calm::alignment::{AlignmentConfig, AlignmentNoise, AlignmentPool};
use calm::autograd::{Graph, Mat, Params};
use calm::nn::{ForwardCtx, ParamBuilder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> calm::error::Result<()> {
    let d = 16;
    let cfg = AlignmentConfig {
        d_align: 16,
        cluster_hidden: 32,
        expert_d_ff: 32,
        fusion_hidden: 32,
        d_calib: 8,
        ..AlignmentConfig::default()
    };
    let mut params = Params::new();
    let pool = AlignmentPool::new(&mut ParamBuilder::new(&mut params, 5), d, &cfg)?;
    let lengths = [7, 9, 6, 8];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = AlignmentNoise::sample(&lengths, cfg.clusters, &mut rng);

    let mut g = Graph::new(&params);
    let tokens = |g: &mut Graph, n: usize, s: usize| {
        g.constant(Mat::from_shape_fn((n, d), |(i, j)| ((i * 31 + j * 7 + s) as f64).cos()))
    };
    let explicit: Vec<_> = lengths.iter().enumerate().map(|(i, &n)| tokens(&mut g, n, i)).collect();
    let latent: Vec<_> = lengths.iter().enumerate().map(|(i, &n)| tokens(&mut g, n, 100 + i)).collect();
    let out = pool.forward(&mut g, &explicit, &latent, &noise, 1.0, &mut ForwardCtx::eval())?;
    for (i, id) in out.identities.iter().enumerate() {
        println!(
            "example {i}: h_self {:?}, calib norm {:.4}",
            g.shape(id.h_self),
            g.value(id.calib).iter().map(|v| v * v).sum::<f64>().sqrt()
        );
    }
    for r in &out.routings {
        println!("{}: selected {:?}", r.dimension.name(), r.selected);
    }
    println!("balance loss {:.5}", g.scalar(out.balance_loss));
    Ok(())
}
