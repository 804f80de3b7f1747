//! Generates the synthetic benchmark and checks its semantic clusters.
//!
//! `cargo run --example synth_fixture -- [out_dir]`

use std::path::PathBuf;

use semcl::protocol::{cluster_margins, synth_benchmark, write_benchmark};
use semcl::SynthConfig;

fn main() -> semcl::Result<()> {
    let out: PathBuf = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("semcl-synth"));
    let cfg = SynthConfig::default();
    let (dataset, table) = synth_benchmark(&cfg)?;

    let (within, across) = cluster_margins(table.vectors(), |c| cfg.cluster_of(c));
    println!("{} classes, dim {}, {} samples", dataset.num_classes(), dataset.dim(), dataset.labels.len());
    println!("min within-cluster cosine {within:.3} > max across-cluster cosine {across:.3}");

    std::fs::create_dir_all(&out).expect("create output directory");
    for d in write_benchmark(&out, &dataset, &table)? {
        println!("{}  {}", d.sha256, d.file);
    }
    println!("written to {}", out.display());
    Ok(())
}
