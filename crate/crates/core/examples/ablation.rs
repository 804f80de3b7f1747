//! Component ablation on the committed fixture: Last accuracy per mode over
//! a seed sweep, with the ordering verdict.
//!
//! `cargo run --release --example ablation -- [num_seeds]`

use std::path::Path;

use semcl::protocol::load_benchmark;
use semcl::trainer::EncoderConfig;
use semcl::{build_stream, run_stream, Mode, TrainConfig};

fn main() -> semcl::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let (data, table) = load_benchmark(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/default"))?;
    let spec = EncoderConfig::default().resolve(data.dim(), table.dim());
    let modes = [Mode::Ft, Mode::OneHot, Mode::SgRl, Mode::SgRlNaiveKd, Mode::Full];
    let seeds: Vec<u64> = (0..n).map(|k| 1993 + k).collect();

    let mut last = vec![vec![0.0; seeds.len()]; modes.len()];
    for (s, &seed) in seeds.iter().enumerate() {
        let stream = build_stream(data.num_classes(), "4x5", seed)?;
        for (k, &mode) in modes.iter().enumerate() {
            let cfg = TrainConfig { mode, seed, ..TrainConfig::desk_scale() };
            last[k][s] = run_stream(&data, &table, &stream, spec.clone(), &cfg)?.last;
        }
    }

    println!("| mode | Last (mean) | per seed |\n|---|---:|---|");
    for (k, mode) in modes.iter().enumerate() {
        let mean = last[k].iter().sum::<f64>() / n as f64;
        let per: Vec<String> = last[k].iter().map(|v| format!("{v:.1}")).collect();
        println!("| {mode} | {mean:.1} | {} |", per.join(" "));
    }
    // ft, sg-rl, sg-rl+naive-kd, full
    let chain = [0, 2, 3, 4];
    let holds = (0..seeds.len()).filter(|&s| chain.windows(2).all(|w| last[w[1]][s] >= last[w[0]][s])).count();
    println!("\nfull ≥ sg-rl+naive-kd ≥ sg-rl ≥ ft on {holds}/{} seeds", seeds.len());
    Ok(())
}
