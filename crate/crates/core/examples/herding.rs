//! Herding exemplar selection versus random picks on one Gaussian class.
//!
//! `cargo run --example herding -- [m]`

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use semcl::herding_select;
use semcl::math::normalize_rows;

fn mean_gap(features: &Array2<f64>, picks: &[usize]) -> f64 {
    let mu = features.mean_axis(Axis(0)).expect("non-empty");
    let sub: Array1<f64> = features.select(Axis(0), picks).mean_axis(Axis(0)).expect("non-empty");
    (&mu - &sub).mapv(|v| v * v).sum().sqrt()
}

fn main() -> semcl::Result<()> {
    let m: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut features = Array2::from_shape_fn((500, 32), |_| StandardNormal.sample(&mut rng));
    // Herding works on unit-norm encoder features.
    normalize_rows(&mut features).expect("non-zero rows");

    let picks = herding_select(features.view(), m)?;
    println!("herding picks (first 10): {:?}", &picks[..picks.len().min(10)]);
    println!("herding mean gap: {:.4}", mean_gap(&features, &picks));

    let random: Vec<f64> = (0..200)
        .map(|_| mean_gap(&features, &sample(&mut rng, features.nrows(), m).into_vec()))
        .collect();
    let avg = random.iter().sum::<f64>() / random.len() as f64;
    let beaten = random.iter().filter(|&&g| g > mean_gap(&features, &picks)).count();
    println!("random mean gap:  {avg:.4} (herding wins {beaten}/200)");
    Ok(())
}
