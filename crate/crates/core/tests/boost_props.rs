mod common;

use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use starlit::boost::{
    goss_sample, logistic_grad_hess, logistic_loss, train_centralized, train_vertical, BoostParams, CanonicalNode,
    FcRequest, FcResponse, FcTrainer, Model, Node,
};
use starlit::he::{keygen, FixedPoint, PaillierKeypair};

fn keys() -> &'static PaillierKeypair {
    static K: OnceLock<PaillierKeypair> = OnceLock::new();
    K.get_or_init(|| keygen(512, 91).unwrap())
}

fn assert_same_structure(a: &Model, b: &Model, tol: f64) {
    let (ca, cb) = (a.canonical(), b.canonical());
    assert_eq!(ca.len(), cb.len());
    for (ta, tb) in ca.iter().zip(&cb) {
        assert_eq!(ta.len(), tb.len());
        for (na, nb) in ta.iter().zip(tb) {
            match (na, nb) {
                (CanonicalNode::Leaf { weight: wa }, CanonicalNode::Leaf { weight: wb }) => {
                    assert!((wa - wb).abs() <= tol, "leaf {wa} vs {wb}")
                }
                _ => assert_eq!(na, nb),
            }
        }
    }
}

#[test]
fn grad_hess_match_finite_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let step = 1e-5;
    for _ in 0..10 {
        let s: f64 = rng.gen_range(-6.0..6.0);
        let y = rng.gen_bool(0.5);
        let (g, h) = logistic_grad_hess(&[y], &[s]);
        let fd_g = (logistic_loss(y, s + step) - logistic_loss(y, s - step)) / (2.0 * step);
        assert!((g[0] - fd_g).abs() < 1e-6, "g at {s}: {} vs {fd_g}", g[0]);
        let (gp, _) = logistic_grad_hess(&[y], &[s + step]);
        let (gm, _) = logistic_grad_hess(&[y], &[s - step]);
        let fd_h = (gp[0] - gm[0]) / (2.0 * step);
        assert!((h[0] - fd_h).abs() < 1e-6, "h at {s}: {} vs {fd_h}", h[0]);
    }
}

#[test]
fn goss_weighted_sum_is_unbiased() {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let g: Vec<f64> = (0..400).map(|_| rng.gen_range(-0.4..1.0)).collect();
    let full: f64 = g.iter().sum();
    let reps = 10_000;
    let mut total = 0.0;
    for seed in 0..reps {
        let (idx, w) = goss_sample(&g, 0.2, 0.1, seed);
        total += idx.iter().zip(&w).map(|(&i, &wi)| g[i] * wi).sum::<f64>();
    }
    let mean = total / reps as f64;
    assert!((mean - full).abs() <= 0.01 * full.abs(), "mean {mean} vs full {full}");
}

#[test]
fn decrypted_histograms_match_plaintext() {
    let frame = common::toy_frame(120, 13, 1, 3);
    let key = keys();
    let mut trainer = FcTrainer::new(&frame.fc, 8, key.public().clone(), 1);
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let g: Vec<f64> = (0..120).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let h: Vec<f64> = (0..120).map(|_| rng.gen_range(0.0..0.25)).collect();
    let enc = |v: &[f64], rng: &mut ChaCha20Rng| {
        v.iter().map(|&x| FixedPoint::encode(x).unwrap().encrypt_with(key, rng).unwrap()).collect::<Vec<_>>()
    };
    let rows: Vec<usize> = (0..120).collect();
    let (gc, hc) = (enc(&g, &mut rng), enc(&h, &mut rng));
    assert_eq!(trainer.handle(FcRequest::TreeStart { rows: rows.clone(), g: gc, h: hc }).unwrap(), FcResponse::Ack);

    let subset: Vec<usize> = rows.iter().copied().filter(|r| r % 3 != 1).collect();
    let FcResponse::Histograms(hist) = trainer.handle(FcRequest::NodeHistograms { rows: subset.clone() }).unwrap() else {
        panic!("expected histograms");
    };
    let binning = trainer.binning().clone();
    for (f, bins) in hist.iter().enumerate() {
        for (b, (cg, ch)) in bins.iter().enumerate() {
            let members: Vec<usize> =
                subset.iter().copied().filter(|&r| usize::from(binning.bin(f, frame.fc.get(r, f))) == b).collect();
            let tol = 2f64.powi(-38) * members.len().max(1) as f64;
            let sg: f64 = members.iter().map(|&r| g[r]).sum();
            let sh: f64 = members.iter().map(|&r| h[r]).sum();
            assert!((FixedPoint::decrypt_with(key, cg).unwrap().decode() - sg).abs() <= tol);
            assert!((FixedPoint::decrypt_with(key, ch).unwrap().decode() - sh).abs() <= tol);
        }
    }
}

fn leaf_of(model: &Model, tree: usize, row: &[f64]) -> usize {
    let nodes = &model.trees[tree].nodes;
    let mut i = 0;
    loop {
        match nodes[i] {
            Node::Leaf { .. } => return i,
            Node::Split { feature, bin, left, right, .. } => {
                i = if model.srv_binning.bin(feature, row[feature]) <= bin { left } else { right };
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn vertical_training_is_lossless(seed in 0u64..1_000, n_fc in 1usize..3, goss in any::<bool>()) {
        let frame = common::toy_frame(80, seed, 2, n_fc);
        let params = BoostParams {
            n_trees: 2,
            max_depth: 2,
            n_bins: 6,
            seed,
            goss: goss.then_some((0.2, 0.3)),
            ..BoostParams::default()
        };
        let central = train_centralized(&frame, &params).unwrap();
        let fed = train_vertical(&frame.srv, &frame.labels, &frame.fc, &params, keys()).unwrap();
        assert_same_structure(&central, &fed, 1e-6);
        let concat = frame.concatenated();
        for r in 0..frame.n_rows() {
            let a = central.predict(concat.row(r), None).unwrap();
            let b = fed.predict(frame.srv.row(r), Some(frame.fc.row(r))).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn leaves_are_newton_steps_and_depth_is_bounded(seed in any::<u64>(), depth in 1usize..5, lambda in 0.0f64..3.0) {
        let frame = common::toy_frame(150, seed, 3, 0);
        let params = BoostParams { n_trees: 3, max_depth: depth, lambda_l2: lambda, n_bins: 10, seed, ..BoostParams::default() };
        let model = train_centralized(&frame, &params).unwrap();
        for t in &model.trees {
            prop_assert!(t.depth() <= depth);
        }
        // First tree: gradients are taken at the base score for every row.
        let scores = vec![model.base_score; frame.n_rows()];
        let (g, h) = logistic_grad_hess(&frame.labels, &scores);
        let nodes = &model.trees[0].nodes;
        let mut sums = vec![(0.0, 0.0); nodes.len()];
        for r in 0..frame.n_rows() {
            let leaf = leaf_of(&model, 0, frame.srv.row(r));
            sums[leaf].0 += g[r];
            sums[leaf].1 += h[r];
        }
        for (i, node) in nodes.iter().enumerate() {
            if let Node::Leaf { weight } = *node {
                let expected = -sums[i].0 / (sums[i].1 + lambda);
                prop_assert!((weight - expected).abs() < 1e-8, "leaf {i}: {weight} vs {expected}");
            }
        }
    }
}
