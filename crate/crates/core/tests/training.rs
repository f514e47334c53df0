mod common;

use gidp_core::dataset::{build_index, generate_synthetic_world, planar_distance, SubmapRecord, SyntheticWorldConfig};
use gidp_core::encoder::{encode_batch, init_architecture, Architecture, EncoderParams, OptimizerState, Target};
use gidp_core::finetune::{finetune_epoch, FinetuneConfig};
use gidp_core::pointcloud::PointCloud;
use gidp_core::pretrain::{pretrain_epoch, PretrainConfig, PretrainState};
use gidp_core::rng;

fn small_world(seed: u64) -> Vec<SubmapRecord> {
    let cfg = SyntheticWorldConfig {
        num_sites: 16,
        points_per_cloud: 128,
        ..SyntheticWorldConfig::default()
    };
    generate_synthetic_world(&cfg, &mut rng::stream(seed, 1)).unwrap()
}

fn small_params(seed: u64) -> EncoderParams {
    init_architecture(seed, &Architecture::new(vec![3, 32, 64], 64).unwrap()).unwrap()
}

/// Mean descriptor distance over same-site pairs and over cross-site pairs.
fn site_distances(params: &EncoderParams, records: &[SubmapRecord]) -> (f64, f64) {
    let clouds: Vec<&PointCloud> = records.iter().map(|r| r.cloud.as_ref()).collect();
    let v = encode_batch(params, &clouds, Target::Descriptor).unwrap();
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
    for i in 0..records.len() {
        for j in i + 1..records.len() {
            let d = common::sq_dist(&v[i], &v[j]).sqrt();
            if planar_distance(records[i].coord, records[j].coord) <= 10.0 {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                nx += 1;
            }
        }
    }
    (intra / ni as f64, inter / nx as f64)
}

#[test]
fn pretraining_raises_positive_similarity() {
    let cfg = PretrainConfig {
        batch_size: 16,
        queue_capacity: 256,
        num_negatives: 32,
        ..PretrainConfig::default()
    };
    let mut wins = 0;
    for seed in 0..5 {
        let records = small_world(seed);
        let clouds: Vec<&PointCloud> = records.iter().map(|r| r.cloud.as_ref()).collect();
        let mut state = PretrainState::new(small_params(seed), &cfg).unwrap();
        let mut r = rng::stream(seed, 2);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..20 {
            let s = pretrain_epoch(&mut state, &clouds, &cfg, &mut r).unwrap();
            if first.is_none() && s.deferred_batches == 0 {
                first = Some(s.mean_positive_similarity);
            }
            last = s.mean_positive_similarity;
        }
        if last > first.unwrap() {
            wins += 1;
        }
    }
    assert!(wins >= 4, "{wins}/5 seeds");
}

#[test]
fn finetuning_separates_sites() {
    let cfg = FinetuneConfig {
        batch_size: 16,
        learning_rate: 1e-2,
        epochs: 20,
        lr_decay_epoch: 15,
        ..FinetuneConfig::default()
    };
    let mut wins = 0;
    for seed in 0..5 {
        let records = small_world(seed);
        let index = build_index(records.clone(), 10.0, 50.0).unwrap();
        let mut params = small_params(seed);
        let mut opt = OptimizerState::adam(cfg.learning_rate, &params);
        let mut r = rng::stream(seed, 3);
        let (i0, x0) = site_distances(&params, &records);
        for epoch in 1..=cfg.epochs {
            finetune_epoch(&mut params, &mut opt, &index, &cfg, epoch, &mut r).unwrap();
        }
        let (i1, x1) = site_distances(&params, &records);
        eprintln!("seed {seed}: intra {i0:.5} -> {i1:.5}, inter {x0:.5} -> {x1:.5}");
        // The untrained encoder maps every cloud close to one point, so
        // training grows both distances; compare them relative to each other.
        if i1 / x1 < i0 / x0 && x1 - i1 > x0 - i0 {
            wins += 1;
        }
    }
    assert!(wins >= 4, "{wins}/5 seeds");
}
