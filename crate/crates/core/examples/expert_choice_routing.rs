//! Expert-choice routing: each expert picks its top-k examples, gates are
//! normalized over the experts that picked an example.

use calm::alignment::{expert_choice_route, load_balance_value, uniform_route, Dimension};
use calm::autograd::Mat;

fn main() -> calm::error::Result<()> {
    let scores = Mat::from_shape_fn((4, 6), |(e, b)| ((e * 7 + b * 3) % 5) as f64 * 0.3 - 0.4);
    let r = expert_choice_route(Dimension::Interpersonality, &scores, 2)?;
    for (e, sel) in r.selected.iter().enumerate() {
        println!("expert {e} selects {sel:?}");
    }
    for (b, gates) in r.gates.iter().enumerate() {
        let total: f64 = gates.iter().map(|g| g.1).sum();
        println!("example {b}: gates {gates:.3?} (sum {total:.3})");
    }
    println!(
        "selections {} (= experts x min(k, B)), coverage {:.3}, importance {:.3?}",
        r.total_selections(),
        r.coverage(),
        r.importance()
    );
    let u = uniform_route(Dimension::Interpersonality, &scores);
    println!(
        "load balance: expert choice {:.4}, uniform {:.4}",
        load_balance_value(std::slice::from_ref(&r)),
        load_balance_value(std::slice::from_ref(&u))
    );
    Ok(())
}
