//! Semantic soft labels for one task, built from label-embedding similarity.
//!
//! `cargo run --example soft_labels -- [alpha]`

use ndarray::Array2;
use semcl::semantic::{intra_similarity, soft_labels};
use semcl::{embed_labels, EmbeddingTable, SoftLabelMatrix};

fn main() -> semcl::Result<()> {
    let alpha: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(13.0);

    // Two animals, two vehicles; the pairs share most of their direction.
    let labels = ["cat", "tiger", "truck", "bus"];
    let rows = Array2::from_shape_vec(
        (4, 3),
        vec![0.9, 0.4, 0.1, 0.85, 0.5, 0.0, 0.1, 0.3, 0.95, 0.0, 0.45, 0.9],
    )
    .expect("4x3");
    let table = EmbeddingTable::from_rows(labels.iter().map(|s| s.to_string()).collect(), rows, "a photo of a {label}.")?;
    let t = embed_labels(&table, &labels)?;

    let s = intra_similarity(t.view())?;
    let soft = soft_labels(s.view(), alpha)?;
    let hard = SoftLabelMatrix::one_hot(labels.len(), 1e-8)?;

    println!("alpha = {alpha}");
    println!("{:>8} {}", "", labels.map(|l| format!("{l:>8}")).join(""));
    for (i, l) in labels.iter().enumerate() {
        let row: String = soft.row(i).iter().map(|v| format!("{v:>8.4}")).collect();
        println!("{l:>8} {row}");
    }
    println!("one-hot row for {:?}: {:?}", labels[0], hard.row(0).to_vec());
    Ok(())
}
