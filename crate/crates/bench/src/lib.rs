//! Synthetic client problems for the benchmarks.

use dald::objectives::{LocalObjective, ObjectiveKind, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` clients with `per_client` samples of dimension `m`; labels are -1/+1 for logistic kinds.
pub fn clients(kind: ObjectiveKind, n: usize, per_client: usize, m: usize, l1_weight: f64, seed: u64) -> Vec<LocalObjective> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    (0..n)
        .map(|_| {
            let samples: Vec<Sample> = (0..per_client)
                .map(|_| {
                    let features: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let score: f64 = features.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>() + rng.random_range(-0.1..0.1);
                    let target = match kind {
                        ObjectiveKind::LeastSquares => score,
                        ObjectiveKind::LogisticL1 => score.signum(),
                    };
                    Sample { features, target }
                })
                .collect();
            LocalObjective::new(kind, &samples, n * per_client, l1_weight).expect("valid synthetic client")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_labels() {
        let c = clients(ObjectiveKind::LogisticL1, 3, 5, 4, 1e-3, 1);
        assert_eq!(c.len(), 3);
        assert!(c.iter().all(|o| o.dim() == 4 && o.local_count() == 5 && o.global_count() == 15));
    }
}
