mod common;

use common::*;
use fedsim::data::{
    generate_synthetic, partition_by_hospital, standardize, test_count, train_test_split, Dataset, SyntheticSpec,
};
use fedsim::executor::Executor;
use fedsim::fedavg::{run_federated, sample_clients, train_client, FedConfig};
use fedsim::metrics::roc_auc;
use fedsim::model::{backward, OptimizerKind};
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn backward_matches_central_differences() {
    let mut r = rng(11);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < 100 {
        let sizes = [r.random_range(1..6), r.random_range(1..8), r.random_range(1..8), 1];
        let p = random_params(&sizes, &mut r, 1.0);
        let n = r.random_range(1..9);
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..sizes[0]).map(|_| r.sample(StandardNormal)).collect())
            .collect();
        let ys: Vec<u8> = (0..n).map(|_| r.random_range(0..=1)).collect();
        if xs
            .iter()
            .flat_map(|x| hidden_preactivations(&p, x))
            .any(|z| z.abs() < 1e-3)
        {
            continue;
        }
        let analytic = backward(&p, xs.iter().map(Vec::as_slice).zip(ys.iter().copied()));
        let numeric = central_difference(&p, &xs, &ys, 1e-5);
        worst = worst.max(max_relative_error(&analytic, &numeric, 1e-5));
        checked += 1;
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn forward_matches_matrix_oracle() {
    let mut r = rng(12);
    for _ in 0..200 {
        let sizes = [r.random_range(1..10), r.random_range(1..12), r.random_range(1..12), 1];
        let p = random_params(&sizes, &mut r, 1.0);
        let x: Vec<f64> = (0..sizes[0]).map(|_| r.sample(StandardNormal)).collect();
        let got = p.forward(&x).unwrap();
        let want = matrix_forward(&p, &x);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn auc_matches_pair_counting() {
    let mut r = rng(13);
    for _ in 0..200 {
        let n = r.random_range(2..=100);
        let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..=1)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // Coarse scores force frequent ties.
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..12)) / 4.0).collect();
        assert_eq!(roc_auc(&scores, &labels).unwrap(), brute_force_auc(&scores, &labels));
    }
}

#[test]
fn auc_of_model_scores_matches_pair_counting() {
    let d = reference_population(3);
    let p = random_params(&[8, 16, 16, 1], &mut rng(14), 0.5);
    let recs = &d.records()[..100];
    let scores: Vec<f64> = recs.iter().map(|x| p.predict(&x.features)).collect();
    let labels: Vec<u8> = recs.iter().map(|x| x.label).collect();
    assert_eq!(roc_auc(&scores, &labels).unwrap(), brute_force_auc(&scores, &labels));
}

#[test]
fn single_sgd_step_is_theta_minus_eta_gradient() {
    let shard = separable_shard(4, 1, 15);
    let cfg = FedConfig {
        local_epochs: 1,
        batch_size: 1,
        learning_rate: 0.05,
        optimizer: OptimizerKind::Sgd,
        hidden_layers: vec![3, 3],
        ..FedConfig::default()
    };
    let theta = random_params(&cfg.layer_sizes(2), &mut rng(16), 1.0);
    let rec = &shard.records()[0];
    let xs = vec![rec.features.clone()];
    let ys = vec![rec.label];
    let grad = backward(&theta, [(rec.features.as_slice(), rec.label)]);
    let numeric = central_difference(&theta, &xs, &ys, 1e-5);
    assert!(max_relative_error(&grad, &numeric, 1e-5) < 1e-4);

    let out = train_client(&shard, &theta, &cfg, 1, 99).unwrap();
    assert_eq!(out.steps, 1);
    let want: Vec<f64> = theta.as_slice().iter().zip(&grad).map(|(t, g)| t - 0.05 * g).collect();
    assert_eq!(out.params.as_slice(), want.as_slice());
}

#[test]
fn long_local_training_fits_separable_shard() {
    let shard = separable_shard(1, 200, 17);
    let cfg = FedConfig {
        local_epochs: 500,
        batch_size: 32,
        learning_rate: 1e-3,
        hidden_layers: vec![8, 8],
        ..FedConfig::default()
    };
    let theta = fedsim::model::MlpParams::init(&cfg.layer_sizes(2), 3).unwrap();
    let out = train_client(&shard, &theta, &cfg, 1, 5).unwrap();
    assert!(training_accuracy(&out.params, shard.records()) >= 0.99);
}

#[test]
fn full_batch_adam_fits_separable_toy_set() {
    let recs = separable_records(1, 200, 18);
    let mut p = fedsim::model::MlpParams::init(&[2, 64, 64, 1], 4).unwrap();
    let mut adam = fedsim::model::AdamState::new(
        p.len(),
        fedsim::model::AdamConfig {
            learning_rate: 0.01,
            ..Default::default()
        },
    );
    for _ in 0..200 {
        let g = backward(&p, recs.iter().map(|r| (r.features.as_slice(), r.label)));
        adam.apply(p.as_mut_slice(), &g).unwrap();
    }
    assert!(training_accuracy(&p, &recs) >= 0.99);
}

#[test]
fn single_client_federation_equals_sequential_training() {
    let shard = separable_shard(7, 90, 19);
    let test = Dataset::new(schema(2), separable_records(8, 40, 20)).unwrap();
    let cfg = FedConfig {
        rounds: 5,
        local_epochs: 3,
        batch_size: 16,
        learning_rate: 1e-3,
        hidden_layers: vec![8, 8],
        seed: 21,
        ..FedConfig::default()
    };
    let fed = run_federated(std::slice::from_ref(&shard), &cfg, &test, &Executor::default()).unwrap();
    let oracle = sequential_oracle(&shard, &cfg);
    let same = fed
        .final_params
        .as_slice()
        .iter()
        .zip(oracle.as_slice())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(same);
}

#[test]
fn sampling_frequencies_are_uniform() {
    let mut counts = [0usize; 5];
    for round in 1..=10_000 {
        let picked = sample_clients(5, 0.2, 23, round);
        assert_eq!(picked.len(), 1);
        counts[picked[0]] += 1;
    }
    for c in counts {
        assert!((1850..=2150).contains(&c), "{counts:?}");
    }
}

#[test]
fn pooled_test_size_is_sum_of_shard_roundings() {
    let d = reference_population(5);
    let shards = partition_by_hospital(&d);
    let split = train_test_split(&shards, 0.3, 2).unwrap();
    let mut expected = 0usize;
    for s in &shards {
        let m = s.size();
        expected += ((0.3 * m as f64).round() as usize).min(m - 1);
    }
    assert_eq!(split.test.len(), expected);
    let target = 0.3 * d.len() as f64;
    assert!((split.test.len() as f64 - target).abs() <= shards.len() as f64 / 2.0);
}

#[test]
fn test_count_matches_brute_force_rounding() {
    for m in 1..200usize {
        for f in [0.1, 0.25, 0.3, 0.5, 0.9] {
            let want = ((f * m as f64).round() as usize).min(m - 1);
            assert_eq!(test_count(m, f), want, "m={m} f={f}");
        }
    }
}

#[test]
fn standardized_training_features_have_unit_moments() {
    let d = reference_population(6);
    let shards = partition_by_hospital(&d);
    let split = train_test_split(&shards, 0.3, 3).unwrap();
    let (train, _, _) = standardize(&split.train, &split.test).unwrap();
    let rows: Vec<&Vec<f64>> = train
        .iter()
        .flat_map(|s| s.records().iter().map(|r| &r.features))
        .collect();
    let n = rows.len() as f64;
    for j in 0..d.feature_dim() {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "feature {j} mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-9, "feature {j} std {}", var.sqrt());
    }
}

#[test]
fn synthetic_generator_gives_one_shard_per_hospital() {
    let d = generate_synthetic(&SyntheticSpec {
        hospital_count: 20,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let shards = partition_by_hospital(&d);
    assert_eq!(shards.len(), 20);
    let mut ids: Vec<u32> = d.records().iter().map(|r| r.hospital_id).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 20);
}

#[test]
fn zero_shift_hospitals_share_feature_means() {
    let d = generate_synthetic(&SyntheticSpec {
        hospital_count: 2,
        min_size: 3000,
        max_size: 3000,
        client_shift_strength: 0.0,
        seed: 9,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let shards = partition_by_hospital(&d);
    let m = 3000.0;
    for j in 0..d.feature_dim() {
        let means: Vec<f64> = shards
            .iter()
            .map(|s| s.records().iter().map(|r| r.features[j]).sum::<f64>() / m)
            .collect();
        assert!((means[0] - means[1]).abs() < 4.0 / m.sqrt(), "feature {j}: {means:?}");
    }
}

#[test]
fn base_positive_rate_is_calibrated() {
    let d = generate_synthetic(&SyntheticSpec {
        hospital_count: 50,
        min_size: 100,
        max_size: 200,
        base_positive_rate: 0.3,
        seed: 10,
        ..SyntheticSpec::default()
    })
    .unwrap();
    assert!(d.len() >= 5000);
    let rate = d.class_counts().1 as f64 / d.len() as f64;
    assert!((rate - 0.3).abs() < 0.05, "{rate}");
}
