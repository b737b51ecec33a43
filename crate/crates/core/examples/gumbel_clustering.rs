//! Gumbel-softmax cluster assignment and cluster summaries across the
//! temperature schedule.

use calm::alignment::{cluster_summaries, gumbel_assign, GumbelSchedule};
use calm::autograd::Mat;
use calm::contrastive::Channel;

fn main() -> calm::error::Result<()> {
    let schedule = GumbelSchedule::default();
    let total = 100;
    let logits = Mat::from_shape_fn((6, 5), |(i, k)| if i % 5 == k { 2.0 } else { 0.0 });
    let h = Mat::from_shape_fn((6, 4), |(i, j)| ((i * 4 + j) as f64).sin());
    for step in [0, 25, 50, 75, 100] {
        let tau = schedule.at(step, total);
        let z = gumbel_assign(&logits, tau, 11, Channel::Latent)?;
        let peak = z.z.rows().into_iter().map(|r| r.fold(0.0_f64, |a, &b| a.max(b))).sum::<f64>() / 6.0;
        let summary = cluster_summaries(&h, &z)?;
        println!(
            "step {step:3}: tau {tau:.3}, mean peak weight {peak:.3}, row-sum error {:.1e}, cluster mass {:.3?}",
            z.row_sum_error(),
            summary.mass
        );
    }
    Ok(())
}
