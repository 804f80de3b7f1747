//! Central finite differences against the analytic gradient of the full
//! objective on a later task (contrastive + soft labels + semantic KD).
//!
//! `cargo run --release --example gradient_check -- [seed]`

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use semcl::math::normalize_rows;
use semcl::trainer::{batch_objective, BatchContext};
use semcl::{Encoder, EncoderKind, EncoderSpec, Mode, TrainConfig};

fn main() -> semcl::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = EncoderSpec {
        kind: EncoderKind::ToyMlp,
        input_dim: 8,
        feature_dim: 8,
        hidden: vec![12],
        trainable_tail: 2,
        init_seed: seed,
    };
    let mut encoder = Encoder::new(spec)?;
    // Previous-task model: the same network, slightly moved.
    let mut previous = encoder.clone();
    let moved: Vec<f64> = previous.trainable_flat().iter().map(|w| w + 0.05 * rng.random_range(-1.0..1.0)).collect();
    previous.set_trainable_flat(&moved)?;
    let snapshot = previous.snapshot();

    let mut emb = Array2::from_shape_fn((8, 8), |_| StandardNormal.sample(&mut rng));
    normalize_rows(&mut emb).expect("non-zero rows");
    let x = Array2::from_shape_fn((10, 8), |_| StandardNormal.sample(&mut rng));
    // Current classes 4..7 plus replayed samples of old classes 1 and 2.
    let labels = [4, 5, 6, 4, 5, 6, 4, 1, 2, 1];
    let cfg = TrainConfig { mode: Mode::Full, ..TrainConfig::full_scale() };
    let ctx = BatchContext { class_embeddings: emb.view(), task_classes: &[4, 5, 6], old_classes: &[0, 1, 2, 3], config: &cfg };

    let (loss, grads) = batch_objective(&encoder, Some(&snapshot), x.view(), &labels, &ctx)?;
    let analytic = grads.flatten();
    let theta = encoder.trainable_flat();
    let h = 1e-5;
    let mut numeric = vec![0.0; theta.len()];
    for k in 0..theta.len() {
        let mut t = theta.clone();
        t[k] = theta[k] + h;
        encoder.set_trainable_flat(&t)?;
        let up = batch_objective(&encoder, Some(&snapshot), x.view(), &labels, &ctx)?.0.total;
        t[k] = theta[k] - h;
        encoder.set_trainable_flat(&t)?;
        let down = batch_objective(&encoder, Some(&snapshot), x.view(), &labels, &ctx)?.0.total;
        numeric[k] = (up - down) / (2.0 * h);
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());

    println!("parameters: {}", theta.len());
    println!("loss: contrastive {:.4}  sg-rl {:.4}  sg-kd {:.4}  total {:.4}", loss.contrastive, loss.sg_rl, loss.kd, loss.total);
    println!("relative gradient error: {:.3e}", diff / scale);
    Ok(())
}
