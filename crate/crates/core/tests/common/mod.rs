//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use fedsim::data::{generate_synthetic, prepare, ClientShard, Dataset, Prepared, Record, SyntheticSpec};
use fedsim::fedavg::{client_seed, FedConfig};
use fedsim::model::{backward, bce_loss, AdamConfig, AdamState, MlpParams};
use fedsim::seed;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fraction of positive/negative pairs ordered correctly, ties counted half.
pub fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut twice = 0u64;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            twice += match si.partial_cmp(&sj).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

/// Plain matrix forward pass, written against nalgebra rather than the flat layout walker.
pub fn matrix_forward(p: &MlpParams, x: &[f64]) -> f64 {
    use nalgebra::{DMatrix, DVector};
    let sizes = p.layer_sizes();
    let mut a = DVector::from_column_slice(x);
    for l in 0..sizes.len() - 1 {
        let (w, b) = p.layer(l);
        let w = DMatrix::from_row_slice(sizes[l + 1], sizes[l], w);
        let z = w * a + DVector::from_column_slice(b);
        a = if l + 2 < sizes.len() { z.map(|v| v.max(0.0)) } else { z };
    }
    1.0 / (1.0 + (-a[0]).exp())
}

/// Hidden-layer pre-activations for every sample, used to keep finite
/// differences away from ReLU kinks.
pub fn hidden_preactivations(p: &MlpParams, x: &[f64]) -> Vec<f64> {
    let sizes = p.layer_sizes();
    let mut a = x.to_vec();
    let mut out = Vec::new();
    for l in 0..sizes.len() - 2 {
        let (w, b) = p.layer(l);
        let z: Vec<f64> = (0..sizes[l + 1])
            .map(|o| b[o] + (0..sizes[l]).map(|i| w[o * sizes[l] + i] * a[i]).sum::<f64>())
            .collect();
        out.extend_from_slice(&z);
        a = z.into_iter().map(|v| v.max(0.0)).collect();
    }
    out
}

pub fn batch_loss(p: &MlpParams, xs: &[Vec<f64>], ys: &[u8]) -> f64 {
    xs.iter().zip(ys).map(|(x, &y)| bce_loss(p.predict(x), y)).sum::<f64>() / xs.len() as f64
}

pub fn central_difference(p: &MlpParams, xs: &[Vec<f64>], ys: &[u8], h: f64) -> Vec<f64> {
    let mut probe = p.clone();
    (0..p.len())
        .map(|k| {
            let v = p.as_slice()[k];
            probe.as_mut_slice()[k] = v + h;
            let up = batch_loss(&probe, xs, ys);
            probe.as_mut_slice()[k] = v - h;
            let down = batch_loss(&probe, xs, ys);
            probe.as_mut_slice()[k] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Max over coordinates of |a - n| / max(|a|, |n|, floor).
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn random_params<R: Rng>(sizes: &[usize], rng: &mut R, scale: f64) -> MlpParams {
    let n = fedsim::model::param_count(sizes);
    let values = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    MlpParams::from_flat(sizes, values).unwrap()
}

pub fn schema(dim: usize) -> Arc<Vec<String>> {
    Arc::new((0..dim).map(|i| format!("x{i}")).collect())
}

/// Two-feature points labelled by the sign of x0 + x1, with a margin gap.
pub fn separable_records(hospital_id: u32, n: usize, seed: u64) -> Vec<Record> {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x: [f64; 2] = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
        let s = x[0] + x[1];
        if s.abs() < 0.3 {
            continue;
        }
        out.push(Record {
            hospital_id,
            stay_id: u64::from(hospital_id) * 1_000_000 + out.len() as u64,
            features: x.to_vec(),
            label: u8::from(s > 0.0),
        });
    }
    out
}

pub fn separable_shard(hospital_id: u32, n: usize, seed: u64) -> ClientShard {
    ClientShard::new(hospital_id, schema(2), separable_records(hospital_id, n, seed)).unwrap()
}

pub fn training_accuracy(p: &MlpParams, records: &[Record]) -> f64 {
    let scores: Vec<f64> = records.iter().map(|r| p.predict(&r.features)).collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    fedsim::metrics::accuracy(&scores, &labels)
}

/// Non-federated training of one shard for `rounds` blocks of `E` epochs,
/// with a fresh optimizer and a fresh shuffle stream per block, seeded as a
/// single-client run would seed it.
pub fn sequential_oracle(shard: &ClientShard, cfg: &FedConfig) -> MlpParams {
    let sizes = cfg.layer_sizes(shard.schema().len());
    let mut theta = MlpParams::init(&sizes, cfg.initial_seed()).unwrap();
    let records = shard.records();
    for r in 1..=cfg.rounds as u32 {
        let mut adam = AdamState::new(
            theta.len(),
            AdamConfig {
                learning_rate: cfg.learning_rate,
                ..AdamConfig::default()
            },
        );
        let mut stream = seed::rng(client_seed(cfg.seed, r, shard.hospital_id()));
        let mut order: Vec<usize> = (0..records.len()).collect();
        for _ in 0..cfg.local_epochs {
            order.shuffle(&mut stream);
            for chunk in order.chunks(cfg.batch_size) {
                let g = backward(
                    &theta,
                    chunk
                        .iter()
                        .map(|&i| (records[i].features.as_slice(), records[i].label)),
                );
                adam.apply(theta.as_mut_slice(), &g).unwrap();
            }
        }
    }
    theta
}

/// The 20-hospital, 50-500 record synthetic population with shift 0.5.
pub fn reference_population(seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        hospital_count: 20,
        min_size: 50,
        max_size: 500,
        client_shift_strength: 0.5,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

/// 30 small hospitals, 5-50 records each.
pub fn small_hospital_population(seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        hospital_count: 30,
        min_size: 5,
        max_size: 50,
        client_shift_strength: 0.5,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

pub fn prepared(d: &Dataset) -> Prepared {
    prepare(d, 0.3, 1).unwrap()
}
