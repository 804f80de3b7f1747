//! Distillation targets that tie each new class to related old classes.
//!
//! `cargo run --example distill_targets -- [tau]`

use ndarray::array;
use semcl::math::normalize_rows;
use semcl::semantic::{distill_targets, inter_similarity, most_similar_old};

fn main() -> semcl::Result<()> {
    let tau: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0.1);

    let old = ["cat", "truck", "oak"];
    let new = ["tiger", "bus"];
    let mut o = array![[0.9, 0.4, 0.1, 0.0], [0.1, 0.3, 0.95, 0.0], [0.0, 0.1, 0.1, 1.0]];
    let mut t = array![[0.85, 0.5, 0.0, 0.1], [0.0, 0.45, 0.9, 0.05]];
    normalize_rows(&mut o).expect("non-zero rows");
    normalize_rows(&mut t).expect("non-zero rows");

    let s = inter_similarity(t.view(), o.view())?;
    let targets = distill_targets(s.view(), tau)?;
    let nearest = most_similar_old(s.view());

    println!("tau = {tau}");
    for (i, n) in new.iter().enumerate() {
        let row: Vec<String> = old.iter().zip(targets.row(i)).map(|(o, q)| format!("{o} {q:.4}")).collect();
        println!("{n:>6}: {}   (closest old class: {})", row.join(", "), old[nearest[i]]);
    }
    Ok(())
}
