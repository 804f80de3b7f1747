//! Few-shot sessions: a full base task, then 5-shot sessions without memory.
//!
//! `cargo run --release --example few_shot -- [shots]`

use std::path::Path;

use semcl::protocol::load_benchmark;
use semcl::trainer::EncoderConfig;
use semcl::{build_fewshot_stream, run_stream, Mode, TrainConfig};

fn main() -> semcl::Result<()> {
    let shots: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let (data, table) = load_benchmark(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/default"))?;
    let stream = build_fewshot_stream(data.num_classes(), 8, 3, 4, shots, 1993)?;
    let spec = EncoderConfig::default().resolve(data.dim(), table.dim());

    for mode in [Mode::Ft, Mode::Full] {
        let cfg = TrainConfig { mode, ..TrainConfig::few_shot() };
        let r = run_stream(&data, &table, &stream, spec.clone(), &cfg)?;
        let curve: Vec<String> = r.accuracies().iter().map(|a| format!("{a:.1}")).collect();
        println!("{mode:>5}: sessions [{}]  Last {:.1}", curve.join(", "), r.last);
    }
    Ok(())
}
