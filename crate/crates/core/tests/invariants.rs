use proptest::prelude::*;

use trajcast::experiment::{run_experiment, ExperimentConfig};
use trajcast::model::{init_params, predict, random_sample, ModelConfig};
use trajcast::numeric::{load_checkpoint, save_checkpoint};

fn small_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 5,
        gcn_hidden: 5,
        decoder_hidden: 5,
        ..ModelConfig::default()
    }
}

fn max_dev(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p[0] - q[0]).abs().max((p[1] - q[1]).abs()))
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn neighbour_order_is_irrelevant(n in 2usize..7, seed in 0u64..10_000, rot in 1usize..6) {
        let model = small_model();
        let params = init_params(&model, seed).unwrap();
        let s = random_sample(n, model.t_in, model.t_out, seed);
        // rotate the non-target nodes
        let mut perm: Vec<usize> = (0..n).collect();
        perm[1..].rotate_left(rot % (n - 1));
        let r = s.relabel(&perm).unwrap();
        let dev = max_dev(&predict(&s, &params, &model).unwrap(), &predict(&r, &params, &model).unwrap());
        prop_assert!(dev < 1e-9, "deviation {dev}");
    }

    #[test]
    fn translation_moves_predictions_rigidly(seed in 0u64..10_000, dx in -5e3f64..5e3, dy in -50f64..50.0) {
        let model = small_model();
        let params = init_params(&model, seed).unwrap();
        let s = random_sample(3, model.t_in, model.t_out, seed);
        let mut moved = s.clone();
        moved.origin.x += dx;
        moved.origin.y += dy;
        let a = predict(&s, &params, &model).unwrap();
        let b = predict(&moved, &params, &model).unwrap();
        let shifted: Vec<[f64; 2]> = a.iter().map(|p| [p[0] + dx, p[1] + dy]).collect();
        prop_assert!(max_dev(&shifted, &b) < 1e-8);
    }

    #[test]
    fn checkpoints_round_trip_bitwise(seed in 0u64..10_000) {
        let params = init_params(&small_model(), seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&params, dir.path()).unwrap();
        prop_assert!(load_checkpoint(dir.path()).unwrap().bit_eq(&params));
    }
}

fn tiny_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 21,
        pool_size: 6,
        personal_drivers: 2,
        pretrain_episodes: 2,
        pretrain_episode_secs: 60.0,
        pretrain_stride: 20,
        round_secs: 120.0,
        personal_stride: 4,
        warmup: 10.0,
        sweep_minutes: vec![0, 2, 4],
        model: small_model(),
        ..ExperimentConfig::default()
    };
    cfg.pretrain.epochs = 2;
    cfg.finetune.epochs = 2;
    cfg.individual.epochs = 2;
    cfg
}

#[test]
fn tiny_experiment_is_complete_and_repeatable() {
    let cfg = tiny_experiment();
    let a = run_experiment(&cfg, true, |_| {}).unwrap();
    let b = run_experiment(&cfg, true, |_| {}).unwrap();
    assert_eq!(a.summary().unwrap(), b.summary().unwrap());

    let pooled = a.pooled().unwrap();
    for model in trajcast::experiment::COLUMNS {
        assert!(pooled.rmse(model).unwrap().iter().all(|v| v.is_finite() && *v >= 0.0), "{model}");
    }
    assert_eq!(a.drivers.len(), 2);
}
