//! A frozen encoder (trainable tail 0) against plain zero-shot evaluation.
//!
//! `cargo run --release --example frozen_backbone`

use std::path::Path;

use semcl::protocol::load_benchmark;
use semcl::trainer::{zero_shot_accuracies, EncoderConfig};
use semcl::{build_stream, run_stream, Encoder, Mode, TrainConfig};

fn main() -> semcl::Result<()> {
    let (data, table) = load_benchmark(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/default"))?;
    let stream = build_stream(data.num_classes(), "4x5", 1993)?;
    let frozen = EncoderConfig { trainable_tail: 0, ..EncoderConfig::default() }.resolve(data.dim(), table.dim());

    let zero_shot = zero_shot_accuracies(&Encoder::new(frozen.clone())?, &data, &table, &stream)?;
    let trained = run_stream(&data, &table, &stream, frozen, &TrainConfig { mode: Mode::Ft, ..TrainConfig::desk_scale() })?;

    for (t, (z, r)) in zero_shot.iter().zip(&trained.tasks).enumerate() {
        println!("task {t}: zero-shot {:5.1}   frozen run {:5.1}", z.top1, r.top1);
    }
    let same = zero_shot.iter().zip(&trained.tasks).all(|(z, r)| z.top1 == r.top1);
    println!("identical: {same}");
    Ok(())
}
