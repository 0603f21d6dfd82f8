//! Independent oracles shared by the property and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use starlit::features::{FeatureFrame, Matrix};
use starlit::game::{expected_privacy, GameSpec, PrivacyMetric, SquareMatrix};
use starlit::ldp::TransformationMatrix;

/// Binary mechanism with flip probabilities `a = f(1|0)` and `b = f(0|1)`.
pub fn binary(a: f64, b: f64) -> TransformationMatrix {
    TransformationMatrix::from_rows(vec![vec![1.0 - a, a], vec![b, 1.0 - b]]).unwrap()
}

fn feasible(spec: &GameSpec, a: f64, b: f64) -> bool {
    let f = [[1.0 - a, a], [b, 1.0 - b]];
    let tol = 1e-9;
    for v in 0..2 {
        for r in 0..2 {
            if f[v][r] > spec.caps.get(v, r) + tol {
                return false;
            }
        }
    }
    if spec.epsilon.is_finite() {
        let e = spec.epsilon.exp();
        for r in 0..2 {
            if f[0][r] > e * f[1][r] + tol || f[1][r] > e * f[0][r] + tol {
                return false;
            }
        }
    }
    true
}

/// Best expected privacy over the (a, b) grid; `None` if no grid point is
/// feasible.
pub fn grid_optimum(spec: &GameSpec, steps: usize) -> Option<(f64, f64, f64)> {
    let mut best: Option<(f64, f64, f64)> = None;
    for i in 0..=steps {
        let a = i as f64 / steps as f64;
        for j in 0..=steps {
            let b = j as f64 / steps as f64;
            if !feasible(spec, a, b) {
                continue;
            }
            let value = expected_privacy(&binary(a, b), &spec.prior, &spec.metric);
            if best.map_or(true, |(v, _, _)| value > v) {
                best = Some((value, a, b));
            }
        }
    }
    best
}

pub fn random_binary_spec<R: Rng>(rng: &mut R) -> GameSpec {
    let p0 = rng.gen_range(0.05..0.95);
    let mut metric = SquareMatrix::filled(2, 0.0);
    metric.set(0, 1, rng.gen_range(0.1..2.0));
    metric.set(1, 0, rng.gen_range(0.1..2.0));
    let mut caps = SquareMatrix::filled(2, 1.0);
    caps.set(0, 1, rng.gen_range(0.5..1.0));
    caps.set(1, 0, rng.gen_range(0.5..1.0));
    let epsilon = if rng.gen_bool(0.1) { f64::INFINITY } else { rng.gen_range(0.0..4.0) };
    GameSpec { prior: vec![p0, 1.0 - p0], metric: PrivacyMetric::Custom(metric), caps, epsilon }
}

/// Average precision by direct definition: for each distinct threshold,
/// precision times the recall gained.
pub fn brute_force_ap(labels: &[bool], scores: &[f64]) -> f64 {
    let positives = labels.iter().filter(|&&y| y).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| labels[i]).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / selected.len() as f64;
        prev_recall = recall;
    }
    ap
}

pub fn names(prefix: &str, k: usize) -> Vec<String> {
    (0..k).map(|i| format!("{prefix}{i}")).collect()
}

/// Small two-party frame: uniform srv columns, ternary fc columns, and a
/// noisy label driven by the first column of each.
pub fn toy_frame(n: usize, seed: u64, n_srv: usize, n_fc: usize) -> FeatureFrame {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut srv = Vec::new();
    let mut fc = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n {
        let s: Vec<f64> = (0..n_srv).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f: Vec<f64> = (0..n_fc).map(|_| f64::from(rng.gen_range(0..3u8))).collect();
        let z = s.first().copied().unwrap_or(0.0) + f.first().copied().unwrap_or(0.0) - 1.0 + rng.gen_range(-0.5..0.5);
        labels.push(z > 0.0);
        srv.push(s);
        fc.push(f);
    }
    if labels.iter().all(|&y| y == labels[0]) {
        labels[0] = !labels[0];
    }
    FeatureFrame::new(
        Matrix::from_rows(names("s", n_srv), &srv).unwrap(),
        Matrix::from_rows(names("f", n_fc), &fc).unwrap(),
        labels,
    )
    .unwrap()
}
