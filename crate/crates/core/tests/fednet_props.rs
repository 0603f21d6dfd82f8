use starlit::datamodel::{generate_synthetic, Dataset, SynthConfig};
use starlit::features::binarize_flag;
use starlit::fednet::{run_pipeline, Backend, FlagCollectionConfig, Federation, RunConfig, TrainingConfig};
use starlit::boost::BoostParams;
use starlit::ldp::rr_matrix;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn data(n: usize) -> Dataset {
    generate_synthetic(&SynthConfig {
        n_transactions: n,
        n_banks: 4,
        accounts_per_bank: 300,
        flag_given_normal: 0.3,
        seed: 31,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// Pearson χ² p-value for a 2×2 table.
fn independence_p(table: [[f64; 2]; 2]) -> f64 {
    let n: f64 = table.iter().flatten().sum();
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let mut stat = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let e = rows[i] * cols[j] / n;
            stat += (table[i][j] - e).powi(2) / e;
        }
    }
    1.0 - ChiSquared::new(1.0).unwrap().cdf(stat)
}

#[test]
fn half_mechanism_flags_are_independent_of_truth() {
    let data = data(10_000);
    let mut fed = Federation::new(&data, 17).unwrap();
    fed.run_discrepancy_phase().unwrap();
    fed.run_flag_collection(&FlagCollectionConfig::new(rr_matrix(0.0, 2).unwrap())).unwrap();

    let mut order = [[0.0; 2]; 2];
    let mut benef = [[0.0; 2]; 2];
    let mut seen = 0;
    for (t, id) in data.transactions.iter().zip(fed.sample_ids()) {
        let Some(row) = id.as_ref().and_then(|id| fed.fc_dataset().get(id)) else {
            continue;
        };
        let truth_o = binarize_flag(data.lookup(&t.sender, &t.ordering_account).unwrap().flag);
        let truth_b = binarize_flag(data.lookup(&t.receiver, &t.beneficiary_account).unwrap().flag);
        order[usize::from(truth_o)][usize::from(row[1].unwrap())] += 1.0;
        benef[usize::from(truth_b)][usize::from(row[3].unwrap())] += 1.0;
        seen += 1;
    }
    assert_eq!(seen, 10_000);
    for (name, table) in [("ordering", order), ("beneficiary", benef)] {
        let p = independence_p(table);
        assert!(p > 0.001, "{name}: p = {p}, table {table:?}");
    }
}

#[test]
fn light_noise_flags_stay_dependent_on_truth() {
    // Sanity check that the test above can detect dependence.
    let data = data(2_000);
    let mut fed = Federation::new(&data, 17).unwrap();
    fed.run_discrepancy_phase().unwrap();
    fed.run_flag_collection(&FlagCollectionConfig::new(rr_matrix(3.0, 2).unwrap())).unwrap();
    let mut order = [[0.0; 2]; 2];
    for (t, id) in data.transactions.iter().zip(fed.sample_ids()) {
        let row = fed.fc_dataset()[id.as_ref().unwrap()];
        let truth = binarize_flag(data.lookup(&t.sender, &t.ordering_account).unwrap().flag);
        order[usize::from(truth)][usize::from(row[1].unwrap())] += 1.0;
    }
    assert!(independence_p(order) < 1e-6);
}

#[test]
fn zero_epsilon_adds_nothing_over_srv_only() {
    let data = data(10_000);
    let flags = FlagCollectionConfig { noise_discrepancy: true, ..FlagCollectionConfig::new(rr_matrix(0.0, 2).unwrap()) };
    let cfg = RunConfig {
        flags,
        training: TrainingConfig {
            backend: Backend::Centralized,
            boost: BoostParams { n_trees: 10, ..BoostParams::default() },
            ..TrainingConfig::default()
        },
        seed: 23,
        faults: Vec::new(),
    };
    let report = run_pipeline(&data, &cfg).unwrap();
    let fed = report.outcome.test_auprc.unwrap();
    let srv = report.outcome.srv_only_test_auprc.unwrap();
    assert!((fed - srv).abs() <= 0.05, "federated {fed} vs srv-only {srv}");
}

#[test]
fn fixed_seed_reproduces_the_run() {
    let data = data(500);
    let cfg = RunConfig {
        flags: FlagCollectionConfig::new(rr_matrix(1.0, 2).unwrap()),
        training: TrainingConfig {
            backend: Backend::Centralized,
            boost: BoostParams { n_trees: 3, ..BoostParams::default() },
            ..TrainingConfig::default()
        },
        seed: 99,
        faults: Vec::new(),
    };
    let a = run_pipeline(&data, &cfg).unwrap();
    let b = run_pipeline(&data, &cfg).unwrap();
    assert_eq!(a.outcome.model, b.outcome.model);
    assert_eq!(a.federation.sample_ids(), b.federation.sample_ids());
    assert_eq!(a.federation.fc_dataset(), b.federation.fc_dataset());
    assert_eq!(a.federation.router().log(), b.federation.router().log());
}
