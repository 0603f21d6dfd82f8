//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use num_bigint::{BigInt, RandBigInt};
use num_integer::Integer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use starlit::boost::{train_centralized, train_vertical, BoostParams, CanonicalNode};
use starlit::cli::{cmd_run, sweep, SweepRow};
use starlit::config::{ExperimentConfig, MechanismSource};
use starlit::datamodel::{generate_synthetic, SynthConfig};
use starlit::fednet::{run_pipeline, Backend, Fault, FlagCollectionConfig, RunConfig, TrainingConfig};
use starlit::game::{expected_privacy, rr_caps, solve_optimal_mechanism, GameSpec, PrivacyMetric, SquareMatrix};
use starlit::he::{keygen, FixedPoint};
use starlit::ldp::{laplace_matrix, ldp_epsilon, rr_matrix};
use starlit::metrics::auprc;
use starlit::psi::{bench_psi, plaintext_intersection, psi_intersect, PsiElement};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn eps_grid() -> Vec<f64> {
    (0..=20).map(|i| 0.5 * f64::from(i)).collect()
}

fn closed_form_mechanisms() -> Outcome {
    for eps in eps_grid() {
        let e = eps.exp();
        let rr = rr_matrix(eps, 2).map_err(|e| e.to_string())?;
        let lap = laplace_matrix(eps, 2).map_err(|e| e.to_string())?;
        let off = 0.5 * (-eps / 2.0).exp();
        for v in 0..2 {
            for r in 0..2 {
                let want_rr = if v == r { e / (1.0 + e) } else { 1.0 / (1.0 + e) };
                let want_lap = if v == r { 1.0 - off } else { off };
                ensure((rr.get(v, r) - want_rr).abs() <= 1e-12, || format!("rr({eps})[{v}][{r}]"))?;
                ensure((lap.get(v, r) - want_lap).abs() <= 1e-12, || format!("laplace({eps})[{v}][{r}]"))?;
            }
        }
        let got = ldp_epsilon(&rr);
        ensure((got - eps).abs() <= 1e-9, || format!("ldp_epsilon(rr({eps})) = {got}"))?;
        let lap_eps = ((1.0 - off) / off).ln();
        ensure((ldp_epsilon(&lap) - lap_eps).abs() <= 1e-9 && lap_eps <= eps + 1e-12, || {
            format!("ldp_epsilon(laplace({eps})) = {}", ldp_epsilon(&lap))
        })?;
    }
    Ok("21 epsilons, both mechanisms".into())
}

fn game_lp_correctness() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(2718);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let spec = common::random_binary_spec(&mut rng);
        let sol = solve_optimal_mechanism(&spec).map_err(|e| format!("spec {i}: {e}"))?;
        let grid = common::grid_optimum(&spec, 100)
            .or_else(|| common::grid_optimum(&spec, 1000))
            .ok_or_else(|| format!("spec {i}: no feasible grid point"))?
            .0;
        let gap = (sol.expected_privacy - grid).abs();
        worst = worst.max(gap);
        ensure(gap <= 2e-2, || format!("spec {i}: simplex {} grid {grid}", sol.expected_privacy))?;
    }

    let hamming = PrivacyMetric::Hamming(2);
    let zero = solve_optimal_mechanism(&GameSpec::uncapped(vec![0.5, 0.5], 0.0)).map_err(|e| e.to_string())?;
    ensure((zero.expected_privacy - 0.5).abs() <= 1e-6, || format!("eps 0: {}", zero.expected_privacy))?;

    for prior in [vec![0.5, 0.5], vec![0.9, 0.1], vec![0.2, 0.8]] {
        let want = 1.0 - prior.iter().cloned().fold(0.0, f64::max);
        let got = solve_optimal_mechanism(&GameSpec::uncapped(prior.clone(), 1.5)).map_err(|e| e.to_string())?;
        ensure((got.expected_privacy - want).abs() <= 1e-6, || format!("caps-free {prior:?}: {}", got.expected_privacy))?;
    }

    let mut caps = SquareMatrix::filled(2, 1.0);
    caps.set(0, 1, 0.25);
    caps.set(1, 0, 0.25);
    let spec = GameSpec { caps, ..GameSpec::uncapped(vec![0.5, 0.5], 3f64.ln()) };
    let sol = solve_optimal_mechanism(&spec).map_err(|e| e.to_string())?;
    ensure((sol.expected_privacy - 0.25).abs() <= 1e-6, || format!("0.25 caps: {}", sol.expected_privacy))?;
    ensure(spec.metric == hamming, || "default metric is not Hamming".into())?;
    Ok(format!("50 specs, worst gap {worst:.2e}; analytic cases hold"))
}

fn game_dominance() -> Outcome {
    let mut min_margin = f64::INFINITY;
    for eps in eps_grid() {
        for prior in [vec![0.5, 0.5], vec![0.9, 0.1], vec![0.3, 0.7], vec![0.99, 0.01]] {
            let spec = GameSpec { caps: rr_caps(eps, 2).map_err(|e| e.to_string())?, ..GameSpec::uncapped(prior.clone(), eps) };
            let game = solve_optimal_mechanism(&spec).map_err(|e| format!("eps {eps}: {e}"))?.expected_privacy;
            let rr = expected_privacy(&rr_matrix(eps, 2).unwrap(), &prior, &PrivacyMetric::Hamming(2));
            min_margin = min_margin.min(game - rr);
            ensure(game >= rr - 1e-7, || format!("eps {eps} prior {prior:?}: game {game} < rr {rr}"))?;
        }
    }
    Ok(format!("min(game - rr) = {min_margin:.2e}"))
}

fn psi_equivalence() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(4096);
    let elem = |rng: &mut ChaCha20Rng| {
        let len = rng.gen_range(1..32);
        PsiElement::new((0..len).map(|_| rng.gen::<u8>()).collect::<Vec<u8>>()).unwrap()
    };
    for i in 0..100 {
        let size = rng.gen_range(1..=1usize << 12);
        let shared: BTreeSet<PsiElement> = (0..rng.gen_range(0..=size)).map(|_| elem(&mut rng)).collect();
        let mut server = shared.clone();
        let mut client = shared;
        while server.len() < size {
            server.insert(elem(&mut rng));
        }
        let client_size = rng.gen_range(client.len().max(1)..=size.max(client.len()).max(1));
        while client.len() < client_size {
            client.insert(elem(&mut rng));
        }
        let t = psi_intersect(&server, &client, i).map_err(|e| e.to_string())?;
        ensure(t.intersection == plaintext_intersection(&server, &client), || format!("instance {i} (size {size})"))?;
    }
    let rows = bench_psi(&[1 << 6, 1 << 8, 1 << 10, 1 << 12]).map_err(|e| e.to_string())?;
    let times: Vec<String> = rows.iter().map(|r| format!("{}:{:.3}s", r.size, r.seconds)).collect();
    ensure(rows.windows(2).all(|w| w[0].seconds <= w[1].seconds), || format!("timings {times:?}"))?;
    Ok(format!("100 instances exact; bench {}", times.join(" ")))
}

fn secureboost_lossless() -> Outcome {
    let keys = keygen(512, 5).map_err(|e| e.to_string())?;
    let mut max_diff: f64 = 0.0;
    for i in 0..20u64 {
        let n = 200 + 90 * i as usize;
        let frame = common::toy_frame(n, 500 + i, 4, 4);
        let params = BoostParams {
            n_trees: 3,
            max_depth: 3,
            n_bins: 16,
            seed: i,
            goss: (i % 4 == 3).then_some((0.2, 0.3)),
            direct_sampling_rate: if i % 5 == 4 { 0.7 } else { 1.0 },
            ..BoostParams::default()
        };
        let central = train_centralized(&frame, &params).map_err(|e| e.to_string())?;
        let fed = train_vertical(&frame.srv, &frame.labels, &frame.fc, &params, &keys).map_err(|e| e.to_string())?;
        let (ca, cb) = (central.canonical(), fed.canonical());
        ensure(ca.len() == cb.len(), || format!("frame {i}: tree counts differ"))?;
        for (t, (ta, tb)) in ca.iter().zip(&cb).enumerate() {
            ensure(ta.len() == tb.len(), || format!("frame {i} tree {t}: node counts differ"))?;
            for (na, nb) in ta.iter().zip(tb) {
                let same = match (na, nb) {
                    (CanonicalNode::Leaf { weight: a }, CanonicalNode::Leaf { weight: b }) => (a - b).abs() <= 1e-6,
                    _ => na == nb,
                };
                ensure(same, || format!("frame {i} tree {t}: {na:?} vs {nb:?}"))?;
            }
        }
        let concat = frame.concatenated();
        for r in 0..n {
            let a = central.predict(concat.row(r), None).map_err(|e| e.to_string())?;
            let b = fed.predict(frame.srv.row(r), Some(frame.fc.row(r))).map_err(|e| e.to_string())?;
            max_diff = max_diff.max((a - b).abs());
        }
        ensure(max_diff <= 1e-6, || format!("frame {i}: prediction gap {max_diff}"))?;
    }
    Ok(format!("20 frames (200..1910 rows, 4/4 features); max prediction gap {max_diff:.1e}"))
}

fn paillier_properties() -> Outcome {
    let key = keygen(512, 6).map_err(|e| e.to_string())?;
    let public = key.public();
    let n = BigInt::from(public.n().clone());
    let mut rng = ChaCha20Rng::seed_from_u64(66);
    for i in 0..1000 {
        let a = rng.gen_biguint_below(public.n());
        let b = rng.gen_biguint_below(public.n());
        let ca = key.encrypt(&a, &mut rng).map_err(|e| e.to_string())?;
        let cb = key.encrypt(&b, &mut rng).map_err(|e| e.to_string())?;
        let sum = key.decrypt(&public.add(&ca, &cb).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure(sum == (&a + &b) % public.n(), || format!("addition case {i}"))?;
        let k = BigInt::from(rng.gen_range(-1_000_000_000i64..1_000_000_000));
        let scaled = key.decrypt(&public.mul_plain(&ca, &k).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let want = (BigInt::from(a) * &k).mod_floor(&n);
        ensure(BigInt::from(scaled) == want, || format!("scalar case {i}"))?;
    }
    let mut worst: f64 = 0.0;
    for count in [1usize, 10, 100, 1000] {
        let values: Vec<f64> = (0..count).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut acc = public.zero();
        for &v in &values {
            let c = FixedPoint::encode(v).unwrap().encrypt_with(&key, &mut rng).map_err(|e| e.to_string())?;
            public.add_assign(&mut acc, &c).map_err(|e| e.to_string())?;
        }
        let total = FixedPoint::decrypt_with(&key, &acc).map_err(|e| e.to_string())?.decode();
        let err = (total - values.iter().sum::<f64>()).abs();
        let bound = 2f64.powi(-38) * count as f64;
        worst = worst.max(err / bound);
        ensure(err <= bound, || format!("fixed-point sum of {count}: error {err:e} > {bound:e}"))?;
    }
    Ok(format!("1000 add/scalar cases exact; worst fixed-point error {worst:.3} of bound"))
}

fn cell(rows: &[SweepRow], mechanism: &str, eps: f64) -> f64 {
    rows.iter()
        .find(|r| r.mechanism == mechanism && r.epsilon == Some(eps) && r.split == "test")
        .map(|r| r.mean_auprc)
        .unwrap_or(f64::NAN)
}

fn utility_privacy_trend() -> Outcome {
    let epsilons = [10.0, 4.0, 2.0, 1.0, 0.5];
    let cfg = ExperimentConfig {
        sweep_mechanisms: vec![MechanismSource::Rr, MechanismSource::Laplace],
        sweep_epsilons: epsilons.to_vec(),
        sweep_backend: Backend::Centralized,
        repetitions: 5,
        ..ExperimentConfig::default()
    };
    ensure(cfg.synth.n_transactions == 50_000 && cfg.synth.anomaly_rate == 0.05, || "generator defaults changed".into())?;
    let rows = sweep(&cfg).map_err(|e| e.to_string())?;
    let mut table = Vec::new();
    for m in ["rr", "laplace"] {
        let curve: Vec<f64> = epsilons.iter().map(|&e| cell(&rows, m, e)).collect();
        table.push(format!("{m} [{}]", curve.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", ")));
        for (w, pair) in curve.windows(2).zip(epsilons.windows(2)) {
            ensure(w[1] <= w[0] + 0.02, || format!("{m}: eps {} -> {} rose {:.4} -> {:.4}", pair[0], pair[1], w[0], w[1]))?;
        }
    }
    for &e in &epsilons {
        let (rr, lap) = (cell(&rows, "rr", e), cell(&rows, "laplace", e));
        ensure(rr >= lap - 0.02, || format!("eps {e}: rr {rr:.4} < laplace {lap:.4} - 0.02"))?;
    }
    Ok(format!("test AUPRC over eps {epsilons:?}: {}", table.join("; ")))
}

fn federated_benefit() -> Outcome {
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig {
        mechanism: MechanismSource::Identity,
        backend: Backend::Centralized,
        output_dir: out.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let summary = cmd_run(&cfg).map_err(|e| e.to_string())?;
    let full = summary.test_auprc.ok_or("no test AUPRC")?;
    let srv = summary.srv_only_test_auprc.ok_or("no srv-only AUPRC")?;
    ensure(full >= srv + 0.05, || format!("full {full:.4} vs srv-only {srv:.4}"))?;
    Ok(format!("full pipeline {full:.4} vs srv-only {srv:.4}"))
}

fn leakage_audit() -> Outcome {
    let data = generate_synthetic(&SynthConfig {
        n_transactions: 300,
        n_banks: 3,
        accounts_per_bank: 40,
        anomaly_rate: 0.15,
        seed: 9,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = |faults: Vec<Fault>, backend| RunConfig {
        flags: FlagCollectionConfig::new(rr_matrix(2.0, 2).unwrap()),
        training: TrainingConfig {
            boost: BoostParams { n_trees: 2, n_bins: 8, ..BoostParams::default() },
            key_bits: 512,
            backend,
            ..TrainingConfig::default()
        },
        seed: 10,
        faults,
    };
    let nominal = run_pipeline(&data, &cfg(Vec::new(), Backend::SecureBoost)).map_err(|e| e.to_string())?;
    ensure(nominal.audit.passed(), || format!("nominal run failed audit:\n{}", nominal.audit))?;
    let mut detected = Vec::new();
    for fault in [Fault::CopyRawFlagToSrv, Fault::IdentityToFc, Fault::NonIntersectionToClient] {
        let report = run_pipeline(&data, &cfg(vec![fault], Backend::Centralized)).map_err(|e| e.to_string())?;
        let injected = report.federation.router().injected().to_vec();
        ensure(!injected.is_empty(), || format!("{fault:?} was never injected"))?;
        for (_, id) in &injected {
            ensure(report.audit.names(*id), || format!("{fault:?}: message {id} not named\n{}", report.audit))?;
        }
        detected.push(format!("{fault:?}->#{}", injected[0].1));
    }
    Ok(format!("nominal pass ({} messages); detected {}", nominal.audit.messages_checked, detected.join(", ")))
}

fn auprc_values() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let perfect = auprc(&[true, true, false, false], &[0.9, 0.8, 0.3, 0.1]).map_err(|e| e.to_string())?;
    ensure(close(perfect, 1.0), || format!("perfect ranking: {perfect}"))?;
    let half = auprc(&[false, true], &[0.9, 0.1]).map_err(|e| e.to_string())?;
    ensure(close(half, 0.5), || format!("[0,1]: {half}"))?;
    let five_sixths = auprc(&[true, false, true], &[0.9, 0.8, 0.7]).map_err(|e| e.to_string())?;
    ensure(close(five_sixths, 5.0 / 6.0), || format!("[1,0,1]: {five_sixths}"))?;

    let mut rng = ChaCha20Rng::seed_from_u64(1010);
    for i in 0..100 {
        let n = rng.gen_range(2..200);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        // Coarse scores so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..20u8)) / 20.0).collect();
        let got = auprc(&labels, &scores).map_err(|e| e.to_string())?;
        let want = common::brute_force_ap(&labels, &scores);
        ensure(close(got, want), || format!("vector {i}: {got} vs {want}"))?;
    }
    Ok("hand cases and 100 brute-force vectors agree".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome, Duration); 10] = [
        ("closed-form mechanisms", closed_form_mechanisms, Duration::from_secs(1)),
        ("game LP correctness", game_lp_correctness, Duration::from_secs(30)),
        ("game dominance over RR", game_dominance, Duration::from_secs(10)),
        ("PSI oracle equivalence", psi_equivalence, Duration::from_secs(300)),
        ("SecureBoost losslessness", secureboost_lossless, Duration::from_secs(600)),
        ("Paillier properties", paillier_properties, Duration::from_secs(60)),
        ("utility-privacy trend", utility_privacy_trend, Duration::from_secs(1800)),
        ("federated benefit", federated_benefit, Duration::from_secs(600)),
        ("leakage audit", leakage_audit, Duration::from_secs(300)),
        ("AUPRC values", auprc_values, Duration::from_secs(1)),
    ];
    let mut failed = Vec::new();
    for (i, (name, check, budget)) in criteria.into_iter().enumerate() {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = started.elapsed();
        let result = result.and_then(|detail| {
            if elapsed <= budget {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {elapsed:.1?}, budget {budget:?}"))
            }
        });
        // Written to the raw handle so the lines show up without --nocapture.
        let line = match result {
            Ok(detail) => format!("PASS {:>2} {name} ({elapsed:.1?}): {detail}", i + 1),
            Err(why) => {
                failed.push(i + 1);
                format!("FAIL {:>2} {name} ({elapsed:.1?}): {why}", i + 1)
            }
        };
        writeln!(std::io::stdout().lock(), "{line}").unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
