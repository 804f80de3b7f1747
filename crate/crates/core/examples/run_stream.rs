//! Trains the full method over the 5-task stream of the committed fixture.
//!
//! `cargo run --release --example run_stream -- [mode] [seed]`

use std::path::Path;

use semcl::protocol::load_benchmark;
use semcl::trainer::EncoderConfig;
use semcl::{build_stream, run_stream, Mode, TrainConfig};

fn main() -> semcl::Result<()> {
    let mut args = std::env::args().skip(1);
    let mode: Mode = args.next().as_deref().unwrap_or("full").parse()?;
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1993);

    let (data, table) = load_benchmark(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/default"))?;
    let stream = build_stream(data.num_classes(), "4x5", seed)?;
    let spec = EncoderConfig::default().resolve(data.dim(), table.dim());
    let cfg = TrainConfig { mode, seed, ..TrainConfig::desk_scale() };
    let report = run_stream(&data, &table, &stream, spec, &cfg)?;

    for t in &report.tasks {
        let mass = t.related_old_mass.map_or(String::new(), |m| format!("  related-old mass {m:.3}"));
        println!("task {} {:?}: top-1 {:5.1}  top-5 {:5.1}{mass}", t.task_id, t.classes, t.top1, t.top5);
    }
    println!("{mode}: Avg {:.1}  Last {:.1}", report.avg, report.last);
    Ok(())
}
