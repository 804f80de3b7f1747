//! Last accuracy of the full method as the exemplar budget grows.
//!
//! `cargo run --release --example exemplar_budget`

use std::path::Path;

use semcl::protocol::load_benchmark;
use semcl::trainer::EncoderConfig;
use semcl::{build_stream, run_stream, TrainConfig};

fn main() -> semcl::Result<()> {
    let (data, table) = load_benchmark(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/default"))?;
    let spec = EncoderConfig::default().resolve(data.dim(), table.dim());
    for m in [0, 1, 5, 20] {
        let mut lasts = Vec::new();
        for seed in 1993..1996 {
            let stream = build_stream(data.num_classes(), "4x5", seed)?;
            let cfg = TrainConfig { exemplars: m, seed, ..TrainConfig::desk_scale() };
            lasts.push(run_stream(&data, &table, &stream, spec.clone(), &cfg)?.last);
        }
        let mean = lasts.iter().sum::<f64>() / lasts.len() as f64;
        println!("m = {m:>2}: mean Last {mean:.1}  {lasts:.1?}");
    }
    Ok(())
}
