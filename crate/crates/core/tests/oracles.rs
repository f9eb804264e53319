//! Metric and discrepancy implementations against brute-force oracles.

use icegan::eval::{competition_score, mcc, roc_auc, ConfusionCounts, ScoreConvention};
use icegan::training::mmd2_rbf;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 100;

fn kernel(x: &[f64], y: &[f64], sigma: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Biased estimate as three double sums over all index pairs.
fn mmd2_oracle(a: &[Vec<f64>], b: &[Vec<f64>], sigma: f64) -> f64 {
    let mean = |p: &[Vec<f64>], q: &[Vec<f64>]| {
        let mut s = 0.0;
        for x in p {
            for y in q {
                s += kernel(x, y, sigma);
            }
        }
        s / (p.len() * q.len()) as f64
    };
    mean(a, a) + mean(b, b) - 2.0 * mean(a, b)
}

fn points(n: usize, dim: usize, shift: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0) + shift).collect())
        .collect()
}

#[test]
fn mmd2_matches_kernel_sum_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = rng.gen_range(1..20);
        let a = points(rng.gen_range(1..30), dim, 0.0, &mut rng);
        let b = points(
            rng.gen_range(1..30),
            dim,
            rng.gen_range(-1.0..1.0),
            &mut rng,
        );
        let sigma = rng.gen_range(0.1..5.0);
        let got = mmd2_rbf(&a, &b, sigma).unwrap();
        let want = mmd2_oracle(&a, &b, sigma);
        assert!(
            (got - want).abs() <= 1e-12,
            "instance {seed}: {got} vs {want}"
        );
        assert!(got >= -1e-12);
    }
}

/// Fraction of (icing, normal) pairs ordered correctly, ties counted half.
fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

#[test]
fn auc_matches_pairwise_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.gen_range(2..200);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        // Coarse quantization forces ties on most instances.
        let levels = rng.gen_range(2..50) as f64;
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let s: f64 = rng.gen_range(0.0..1.0) + if l { 0.2 } else { 0.0 };
                (s * levels).floor() / levels
            })
            .collect();
        let roc = roc_auc(&scores, &labels).unwrap();
        let want = auc_oracle(&scores, &labels);
        assert!(
            (roc.auc - want).abs() <= 1e-12,
            "instance {seed}: {} vs {want}",
            roc.auc
        );
        assert!((roc.trapezoid_auc() - want).abs() <= 1e-12);
    }
}

fn counts(tp: u64, fn_: u64, fp: u64, tn: u64) -> ConfusionCounts {
    ConfusionCounts { tp, fn_, fp, tn }
}

#[test]
fn score_matches_direct_formula() {
    // N_normal = 100, N_fault = 10.
    let direct = |fn_: f64, fp: f64| {
        let alpha = 10.0 / 100.0;
        1.0 - alpha * fn_ / 100.0 - (1.0 - alpha) * fp / 10.0
    };
    let s = competition_score(&counts(8, 2, 1, 99), ScoreConvention::Verbatim).unwrap();
    assert_eq!(s.to_bits(), direct(2.0, 1.0).to_bits());
    assert!((s - 0.908).abs() < 1e-15);
    let s = competition_score(&counts(10, 0, 10, 90), ScoreConvention::Verbatim).unwrap();
    assert_eq!(s.to_bits(), direct(0.0, 10.0).to_bits());
    assert!((s - 0.1).abs() < 1e-15);
    assert_eq!(
        competition_score(&counts(10, 0, 0, 100), ScoreConvention::Verbatim).unwrap(),
        1.0
    );
}

#[test]
fn mcc_matches_direct_formula() {
    let c = counts(90, 10, 20, 80);
    let direct = (90.0 * 80.0 - 20.0 * 10.0) / (110.0f64 * 100.0 * 100.0 * 90.0).sqrt();
    assert_eq!(mcc(&c).to_bits(), direct.to_bits());
    assert_eq!(direct, 7000.0 / (110.0f64 * 100.0 * 100.0 * 90.0).sqrt());
    assert_eq!(mcc(&counts(5, 0, 0, 7)), 1.0);
    assert_eq!(mcc(&counts(4, 4, 4, 4)), 0.0);
}
