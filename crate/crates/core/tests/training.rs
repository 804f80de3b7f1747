use std::path::PathBuf;

use proptest::prelude::*;
use semcl::protocol::load_benchmark;
use semcl::trainer::{EncoderConfig, FewShotConfig};
use semcl::{
    build_fewshot_stream, build_stream, predict, run_stream, Dataset, EmbeddingTable, Encoder, Mode, TrainConfig, Trainer,
};

fn fixture() -> (Dataset, EmbeddingTable) {
    load_benchmark(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/default")).unwrap()
}

#[test]
fn loss_traces_are_finite_for_every_mode_and_stream() {
    let (data, table) = fixture();
    let spec = EncoderConfig::default().resolve(data.dim(), table.dim());
    let few = FewShotConfig { base: 8, sessions: 3, ways: 4, shots: 5 };
    let streams = [
        build_stream(20, "4x5", 1993).unwrap(),
        build_stream(20, "10+5x2", 1993).unwrap(),
        build_fewshot_stream(20, few.base, few.sessions, few.ways, few.shots, 1993).unwrap(),
    ];
    for stream in &streams {
        for mode in Mode::ALL {
            let cfg = TrainConfig { mode, epochs: 2, ..TrainConfig::desk_scale() };
            let r = run_stream(&data, &table, stream, spec.clone(), &cfg).unwrap();
            assert!(r.loss_trace.iter().all(|l| l.total.is_finite()), "{mode} {}", stream.split);
            assert!((0.0..=100.0).contains(&r.avg) && (0.0..=100.0).contains(&r.last));
        }
    }
}

#[test]
fn cumulative_test_counts() {
    let (data, table) = fixture();
    let spec = EncoderConfig::default().resolve(data.dim(), table.dim());
    let stream = build_stream(20, "4x5", 7).unwrap();
    let r = run_stream(&data, &table, &stream, spec, &TrainConfig { epochs: 1, ..TrainConfig::desk_scale() }).unwrap();
    let per_class = data.test_rows(&[0]).len();
    for (t, task) in r.tasks.iter().enumerate() {
        assert_eq!(task.related_old_mass.is_none(), t == 0);
        assert!(task.related_old_mass.is_none_or(|m| (0.0..=1.0).contains(&m)));
        assert_eq!(task.num_seen_classes, 4 * (t + 1));
        assert_eq!(task.num_test_samples, per_class * 4 * (t + 1));
    }
}

#[test]
fn only_the_latest_task_model_is_kept() {
    let (data, table) = fixture();
    let spec = EncoderConfig::default().resolve(data.dim(), table.dim());
    let stream = build_stream(20, "4x5", 3).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::desk_scale() };
    let mut trainer = Trainer::new(&data, &table, Encoder::new(spec).unwrap(), cfg).unwrap();
    assert!(trainer.previous_model().is_none());
    for task in &stream.tasks[..3] {
        trainer.train_task(task).unwrap();
        let snap = trainer.previous_model().unwrap();
        assert_eq!(snap.encoder(), trainer.encoder());
    }
    assert_eq!(trainer.store().len(), 12 * 20);
}

// Does not hold on the desk-scale fixture: per-seed masses are under 0.03 and
// their ordering across modes follows seed noise. Run with --ignored to check.
#[test]
#[ignore = "not reproduced at desk scale; see README"]
fn semantic_distillation_raises_mass_on_related_old_classes() {
    let (data, table) = fixture();
    let spec = EncoderConfig::default().resolve(data.dim(), table.dim());
    let mass = |mode| {
        let mut total = 0.0;
        let mut n = 0.0;
        for seed in 1993..1996 {
            let stream = build_stream(20, "4x5", seed).unwrap();
            let r = run_stream(&data, &table, &stream, spec.clone(), &TrainConfig { mode, seed, ..TrainConfig::desk_scale() }).unwrap();
            for m in r.tasks.iter().filter_map(|t| t.related_old_mass) {
                total += m;
                n += 1.0;
            }
        }
        total / n
    };
    let (full, ft) = (mass(Mode::Full), mass(Mode::Ft));
    assert!(full > ft, "full {full} vs ft {ft}");
}

proptest! {
    #[test]
    fn predict_follows_the_largest_cosine(
        raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..8),
        query in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let unit = |v: &[f64]| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        prop_assume!(raw.iter().chain([&query]).all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6));
        let rows: Vec<f64> = raw.iter().flat_map(|v| unit(v)).collect();
        let seen = ndarray::Array2::from_shape_vec((raw.len(), 4), rows).unwrap();
        let q = ndarray::Array1::from(unit(&query));
        let (best, scores) = predict(q.view(), seen.view()).unwrap();
        let cos: Vec<f64> = seen.rows().into_iter().map(|r| r.dot(&q)).collect();
        let first_max = (0..cos.len()).fold(0, |b, i| if cos[i] > cos[b] { i } else { b });
        prop_assert_eq!(best, first_max);
        prop_assert!((scores.sum() - 1.0).abs() < 1e-12);
        prop_assert!(scores.iter().all(|&s| s <= scores[best]));
    }
}
