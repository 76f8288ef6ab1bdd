use proptest::prelude::*;

use corrflow::action::{from_delta, to_delta, ActionChunk, ActionLayout, NormalizationStats};
use corrflow::attention::{build_mask, Group, KvMixer, KvTensor, TokenGroups};
use corrflow::checkpoint::Checkpoint;
use corrflow::correlation::{estimate_covariance, CorrelationModel};
use corrflow::inference::{compress, CompressionConfig, GripperStats, NaturalSpline};
use corrflow::linalg::Matrix;
use corrflow::stage::{label_stages, StageTracker};
use corrflow::world::{EpisodeOutcome, EvalReport, GoalReport, WorldSpec};

fn layout() -> ActionLayout {
    ActionLayout::new(4, 3, vec![0], vec![2], 10.0).unwrap()
}

fn chunk_strategy(h: usize, d: usize) -> impl Strategy<Value = ActionChunk<f64>> {
    prop::collection::vec(-50.0..50.0f64, h * d).prop_map(move |v| ActionChunk::from_flat(h, d, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn delta_round_trip(c in chunk_strategy(4, 3), joints in prop::collection::vec(-5.0..5.0f64, 3)) {
        let lay = layout();
        let delta = to_delta(&lay, &c, &joints).unwrap();
        prop_assert!(from_delta(&lay, &delta, &joints).unwrap().max_abs_diff(&c) <= 1e-12);
        for d in 0..3 {
            let exempt = lay.is_delta_exempt(d);
            for i in 0..4 {
                let shift = c.get(i, d) - delta.get(i, d);
                let expected = if exempt { 0.0 } else { joints[d] };
                prop_assert!((shift - expected).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn normalization_round_trip(fit in prop::collection::vec(chunk_strategy(4, 3), 2..12), c in chunk_strategy(4, 3)) {
        let lay = layout();
        let stats = NormalizationStats::fit(&fit, &lay, &lay.default_exempt_dims()).unwrap();
        let back = stats.denormalize(&stats.normalize(&c).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&c) <= 1e-9 * (1.0 + c.flat().iter().fold(0.0f64, |a, v| a.max(v.abs()))));
    }

    #[test]
    fn shrunk_covariance_is_a_convex_blend(chunks in prop::collection::vec(chunk_strategy(3, 2), 1..8), beta in 0.0..0.99f64) {
        let sigma = estimate_covariance(&chunks).unwrap();
        let lay = ActionLayout::new(3, 2, vec![], vec![], 10.0).unwrap();
        let m = CorrelationModel::<f64>::from_covariance(lay, &sigma, beta).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expected = beta * sigma[(i, j)] + if i == j { 1.0 - beta } else { 0.0 };
                prop_assert!((m.sigma_reg[(i, j)] - expected).abs() <= 1e-9 * (1.0 + expected.abs()));
            }
        }
        // The regression matrix solves M Σ_OO = Σ_UO.
        let part = m.build_partition(1).unwrap();
        for (r, &u) in part.free.iter().enumerate() {
            for &o in &part.observed {
                let lhs: f64 = part.observed.iter().enumerate().map(|(c, &p)| part.m_corr[(r, c)] * m.sigma_reg[(p, o)]).sum();
                prop_assert!((lhs - m.sigma_reg[(u, o)]).abs() <= 1e-6 * (1.0 + m.sigma_reg[(u, o)].abs()));
            }
        }
    }

    #[test]
    fn tracker_moves_at_most_one_stage(n in 1usize..16, raws in prop::collection::vec(0usize..16, 0..60)) {
        let mut t = StageTracker::new(n);
        let mut prev = t.current();
        for r in raws {
            let s = t.vote(r.min(n - 1));
            prop_assert!(s < n);
            prop_assert!(s.abs_diff(prev) <= 1);
            prev = s;
        }
    }

    #[test]
    fn stage_labels_are_monotone_and_cover(len in 1usize..400, n in 1usize..16) {
        prop_assume!(len >= n);
        let l = label_stages(len, n).unwrap();
        prop_assert_eq!(l.len(), len);
        prop_assert!(l.windows(2).all(|w| w[0] <= w[1] && w[1] - w[0] <= 1));
        prop_assert_eq!((l[0], l[len - 1]), (0, n - 1));
    }

    #[test]
    fn spline_hits_its_knots(y in prop::collection::vec(-10.0..10.0f64, 4..40)) {
        let s = NaturalSpline::fit(&y).unwrap();
        for (i, &v) in y.iter().enumerate() {
            prop_assert!((s.eval(i as f64) - v).abs() <= 1e-9);
        }
    }

    #[test]
    fn compression_keeps_constant_rows(row in prop::collection::vec(-3.0..3.0f64, 3), in_steps in 4usize..40, frac in 0.3..1.0f64) {
        let out_steps = ((in_steps as f64 * frac).round() as usize).clamp(2, in_steps);
        let cfg = CompressionConfig { in_steps, out_steps, velocity_dims: vec![0], gripper_dims: vec![2], gripper_change_threshold: 0.5 };
        let input = Matrix::from_fn(in_steps, 3, |_, j| row[j]);
        let out = compress(&input, &cfg).unwrap();
        for m in 0..out_steps {
            prop_assert!((out[(m, 0)] - cfg.speedup() * row[0]).abs() <= 1e-9);
            prop_assert!((out[(m, 1)] - row[1]).abs() <= 1e-9);
        }
    }

    #[test]
    fn mask_depends_only_on_groups(sizes in prop::array::uniform6(0usize..5)) {
        let g = TokenGroups { image: sizes[0], task: sizes[1], stage: sizes[2], state: sizes[3], fast: sizes[4], action: sizes[5] };
        let m = build_mask(&g);
        let labels = g.labels();
        for q in 0..m.len() {
            for k in 0..m.len() {
                let (gq, gk) = (labels[q], labels[k]);
                if gq == Group::Fast && gk == Group::Fast {
                    prop_assert_eq!(m.get(q, k), k <= q);
                } else {
                    // Any other token pair from the same two groups gives the same entry.
                    let q2 = labels.iter().rposition(|&l| l == gq).unwrap();
                    let k2 = labels.iter().position(|&l| l == gk).unwrap();
                    prop_assert_eq!(m.get(q, k), m.get(q2, k2));
                }
            }
        }
    }

    #[test]
    fn mixer_is_affine(seed in any::<u64>(), s in -2.0..2.0f64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let shape = [1, 3, 2, 2];
        let mut cache = || KvTensor::new(shape, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let a: Vec<KvTensor<f64>> = (0..3).map(|_| cache()).collect();
        let b: Vec<KvTensor<f64>> = (0..3).map(|_| cache()).collect();
        let mut mixer = KvMixer::<f64>::identity(3, 2, 2, 2);
        mixer.w_k = Matrix::from_fn(3, 2, |i, j| (i as f64 - j as f64) * 0.7 + 0.1);
        mixer.b_k = vec![vec![0.5; 4]; 2];
        let blend: Vec<KvTensor<f64>> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| KvTensor::new(shape, x.data.iter().zip(&y.data).map(|(u, v)| s * u + (1.0 - s) * v).collect()).unwrap())
            .collect();
        let (ka, _) = mixer.mix_kv(&a, &a).unwrap();
        let (kb, _) = mixer.mix_kv(&b, &b).unwrap();
        let (kc, _) = mixer.mix_kv(&blend, &blend).unwrap();
        for ((x, y), z) in ka.iter().zip(&kb).zip(&kc) {
            for ((u, v), w) in x.data.iter().zip(&y.data).zip(&z.data) {
                prop_assert!((s * u + (1.0 - s) * v - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip(blobs in prop::collection::vec(prop::collection::vec(-1e6..1e6f64, 0..50), 0..4)) {
        let mut ck = Checkpoint::new("test", serde_json::json!({ "n": blobs.len() }));
        for (i, b) in blobs.iter().enumerate() {
            ck = ck.with_blob(&format!("b{i}"), b.clone());
        }
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        back.expect_kind("test").unwrap();
        for (i, b) in blobs.iter().enumerate() {
            prop_assert_eq!(back.blob(&format!("b{i}")).unwrap(), b.as_slice());
        }
    }

    #[test]
    fn gripper_correction_is_idempotent(grip in 0.0..1.0f64, stage in 0usize..6) {
        let spec = WorldSpec::standard();
        let ds = corrflow::world::generate_demos(&spec, &[1], 2, 3).unwrap();
        let stats = GripperStats::fit(&ds).unwrap();
        let (once, _) = stats.correct(&[0.0, 0.0, 0.0, 0.0, grip], 1, stage);
        let (twice, fired) = stats.correct(&once, 1, stage);
        prop_assert_eq!(&once, &twice);
        prop_assert!(!fired);
    }

    #[test]
    fn q_score_ignores_episode_order(flags in prop::collection::vec((0usize..4, prop::collection::vec(any::<bool>(), 1..4)), 1..20), rot in 0usize..20) {
        let spec = WorldSpec::standard();
        let outcomes: Vec<EpisodeOutcome> = flags
            .iter()
            .enumerate()
            .map(|(i, (task, f))| EpisodeOutcome {
                task: *task,
                episode: i,
                report: GoalReport::from_flags(f),
                steps: 10,
                time_limit: 100,
                distance: 1.0,
                failure: None,
            })
            .collect();
        let mut shuffled = outcomes.clone();
        shuffled.rotate_left(rot % outcomes.len());
        shuffled.reverse();
        let a = EvalReport::from_outcomes(&spec, &[0, 1, 2, 3], outcomes);
        let b = EvalReport::from_outcomes(&spec, &[0, 1, 2, 3], shuffled);
        prop_assert_eq!(&a, &b);
        prop_assert!((0.0..=1.0).contains(&a.q_score));
    }
}
