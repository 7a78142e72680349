use proptest::prelude::*;

use latentwm::env::{self, EnvConfig, RoomWorldState};
use latentwm::eval::{embedding_stats, paired_t_test, pearson, straightening};
use latentwm::losses::{pldm_loss, EmbeddingBatch, PldmCoefficients};
use latentwm::numerics::{DenseArray, Graph, SeededRng};
use latentwm::planner::{cem, CemConfig};
use latentwm::sigreg::{epps_pulley, sample_directions, sigreg, EppsPulleyConfig};
use latentwm::worldmodel::{read_checkpoint, write_checkpoint, WorldModel, WorldModelConfig};

fn matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> DenseArray {
    let mut rng = SeededRng::new(seed);
    DenseArray::matrix(rows, cols, rng.normal_vec(rows * cols).into_iter().map(|x| x * scale).collect())
}

fn tiny_model(seed: u64) -> WorldModel {
    let cfg = WorldModelConfig {
        obs_height: 4,
        obs_width: 4,
        embed_dim: 3,
        encoder_hidden: vec![5],
        predictor_hidden: vec![4],
        frame_skip: 2,
        ..WorldModelConfig::default()
    };
    WorldModel::new(cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn epps_pulley_is_non_negative(sample in prop::collection::vec(-50.0f64..50.0, 2..200)) {
        let s = epps_pulley(&sample, &EppsPulleyConfig::default()).unwrap();
        prop_assert!(s >= 0.0 && s.is_finite());
    }

    #[test]
    fn sigreg_ignores_row_order(n in 2usize..40, d in 1usize..6, scale in 0.01f64..10.0, seed in any::<u32>()) {
        let z = matrix(n, d, scale, seed as u64);
        let dirs = sample_directions(8, d, 1).unwrap();
        let cfg = EppsPulleyConfig::default();
        let base = sigreg(&z, &dirs, &cfg).unwrap();
        let reversed = DenseArray::from_rows(&(0..n).rev().map(|i| z.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!((base - sigreg(&reversed, &dirs, &cfg).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn pldm_components_are_non_negative(b in 2usize..7, t in 2usize..5, d in 1usize..5, seed in any::<u32>()) {
        let mut g = Graph::new();
        let seed = seed as u64;
        let batch = EmbeddingBatch {
            steps: (0..t).map(|k| g.constant(matrix(b, d, 0.1 + k as f64, seed + k as u64))).collect(),
            predicted: (0..t - 1).map(|k| g.constant(matrix(b, d, 1.0, seed + 100 + k as u64))).collect(),
        };
        let actions: Vec<_> = (0..t - 1).map(|k| g.constant(matrix(b, 4, 1.0, seed + 200 + k as u64))).collect();
        let v = pldm_loss(&mut g, &batch, &actions, &tiny_model(1), &PldmCoefficients { nu: 1.0, ..PldmCoefficients::default() })
            .unwrap()
            .values(&g);
        for c in [v.pred, v.var, v.cov, v.time_sim, v.time_var, v.time_cov, v.total] {
            prop_assert!(c >= 0.0 && c.is_finite(), "{v:?}");
        }
    }

    #[test]
    fn agent_stays_legal(seed in any::<u32>(), left in any::<bool>(), moves in prop::collection::vec((-0.1f64..0.1, -0.1f64..0.1), 1..60)) {
        let cfg = EnvConfig::default();
        let room = if left { env::Room::Left } else { env::Room::Right };
        let start = env::sample_position(room, &cfg, &mut SeededRng::new(seed as u64));
        let mut s = RoomWorldState { agent: start, goal: [0.5, 0.5], color_idx: 0 };
        for (dx, dy) in moves {
            s = env::step(&s, [dx, dy], &cfg);
            prop_assert!(env::is_valid_position(s.agent, &cfg), "left the legal region at {:?}", s.agent);
        }
    }

    #[test]
    fn straightening_is_bounded(t in 3usize..12, d in 1usize..5, seed in any::<u32>()) {
        let z = matrix(t, d, 1.0, seed as u64);
        let s = straightening(&[z]).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s.value));
    }

    #[test]
    fn pearson_is_bounded(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..100)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Ok(r) = pearson(&a, &b) {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn t_test_p_is_a_probability(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..60)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Ok(r) = paired_t_test(&a, &b) {
            prop_assert!((0.0..=1.0).contains(&r.p), "p = {}", r.p);
        }
    }

    #[test]
    fn embedding_stats_ignore_row_order(n in 2usize..30, d in 1usize..5, seed in any::<u32>()) {
        let z = matrix(n, d, 2.0, seed as u64);
        let rev = DenseArray::from_rows(&(0..n).rev().map(|i| z.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let (a, b) = (embedding_stats(&z).unwrap(), embedding_stats(&rev).unwrap());
        prop_assert!((a.mean_std() - b.mean_std()).abs() <= 1e-12);
    }

    #[test]
    fn cem_stays_in_bounds_and_keeps_a_running_min(seed in any::<u32>(), lo in -2.0f64..-0.1, hi in 0.1f64..2.0) {
        let cfg = CemConfig { n_samples: 20, n_elites: 4, n_iters: 4, horizon: 2, action_low: lo, action_high: hi, seed: seed as u64, ..CemConfig::default() };
        let cost = |a: &[f64]| {
            assert!(a.iter().all(|x| (lo..=hi).contains(x)), "candidate out of bounds");
            a.iter().map(|x| (x - 0.3).powi(2)).sum::<f64>()
        };
        let r = cem(&cost, 3, &cfg).unwrap();
        let mut best = f64::INFINITY;
        for &c in &r.cost_trace {
            best = best.min(c);
        }
        prop_assert_eq!(best, r.best_cost);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical(seed in any::<u32>()) {
        let model = tiny_model(seed as u64);
        let mut first = vec![];
        write_checkpoint(&model, &mut first).unwrap();
        let back = read_checkpoint(&mut first.as_slice()).unwrap();
        let mut second = vec![];
        write_checkpoint(&back, &mut second).unwrap();
        prop_assert_eq!(first, second);
    }
}

/// One seeded draw, read at growing prefix lengths.
#[test]
fn gaussian_statistic_shrinks_with_sample_size() {
    let cfg = EppsPulleyConfig::default();
    let sample = SeededRng::new(2024).normal_vec(4096);
    let stats: Vec<f64> = [64, 256, 1024, 4096]
        .iter()
        .map(|&n| epps_pulley(&sample[..n], &cfg).unwrap())
        .collect();
    assert!(stats.windows(2).all(|w| w[1] <= w[0]), "{stats:?}");
}
