// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic generator, matcher, task and rule streams.

use featrace_core::attribution::{attribution_scores, load_task, read_task_file, MetricHead, TaskSample, Variant};
use featrace_core::rules::{classify_index, RuleClass};
use featrace_core::synth::{
    generate_task, ground_truth, match_features, rule_streams, shard_latents, write_dataset, SynthConfig, TaskConfig,
};
use featrace_core::CrosscoderModel;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn firing_rates_fall_within_binomial_bounds() {
    let cfg = SynthConfig::default();
    let gt = ground_truth(&cfg, 42).unwrap();
    let mut counts = vec![0u64; gt.n_features()];
    let n_shards = cfg.n_tokens.div_ceil(cfg.shard_tokens);
    for s in 0..n_shards {
        for row in shard_latents(&cfg, &gt, s).codes {
            for (i, c) in row {
                assert!(c >= 0.0);
                counts[i as usize] += 1;
            }
        }
    }
    let n = cfg.n_tokens as f64;
    let z: Vec<f64> = counts
        .iter()
        .zip(&gt.firing_probs)
        .map(|(&k, &p)| (k as f64 - n * p) / (n * p * (1.0 - p)).sqrt())
        .collect();
    // Family-wise: a lone 3-sigma feature out of 100 is expected, 4-sigma is not.
    for (i, zi) in z.iter().enumerate() {
        assert!(zi.abs() <= 4.0, "feature {i}: z = {zi}");
    }
    let m2 = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
    assert!((0.7..1.3).contains(&m2), "mean z^2 = {m2}");
}

/// Independent Monte-Carlo oracle: greedy signed-cosine matching between
/// two sets of random unit vectors, averaged over trials.
fn random_matching_mean(n_true: usize, n_feat: usize, d: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let mut total = 0.0;
    for _ in 0..trials {
        let a: Vec<Vec<f64>> = (0..n_true).map(|_| unit(&mut rng)).collect();
        let b: Vec<Vec<f64>> = (0..n_feat).map(|_| unit(&mut rng)).collect();
        let mut cos = vec![vec![0.0; n_feat]; n_true];
        for i in 0..n_true {
            for j in 0..n_feat {
                cos[i][j] = a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum();
            }
        }
        let (mut ua, mut ub) = (vec![false; n_true], vec![false; n_feat]);
        for _ in 0..n_true {
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for i in (0..n_true).filter(|&i| !ua[i]) {
                for j in (0..n_feat).filter(|&j| !ub[j]) {
                    if cos[i][j] > best.0 {
                        best = (cos[i][j], i, j);
                    }
                }
            }
            ua[best.1] = true;
            ub[best.2] = true;
            total += best.0;
        }
    }
    total / (trials * n_true) as f64
}

#[test]
fn random_checkpoint_matches_at_chance_level() {
    let cfg = SynthConfig::default();
    let gt = ground_truth(&cfg, 5).unwrap();
    let d = cfg.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = CrosscoderModel::<f32>::random_init(gt.n_features(), d, gt.steps.clone(), 0.1, &mut rng);
    let report = match_features(&model, &gt).unwrap();
    let cos = report.cosines();
    let mean = cos.iter().sum::<f64>() / cos.len() as f64;
    let oracle = random_matching_mean(gt.n_features(), gt.n_features(), d, 5, 99);
    assert!((mean - oracle).abs() < 0.03, "mean {mean}, oracle {oracle}");
    // Greedy maxima sit above the single-pair baseline but nowhere near a match.
    assert!(mean > 1.0 / (d as f64).sqrt());
    assert_eq!(report.fraction_matched(0.8), 0.0);
}

#[test]
fn permuting_features_keeps_match_quality() {
    let cfg = SynthConfig {
        n_true_features: 30,
        ..SynthConfig::default()
    };
    let gt = ground_truth(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = 60;
    let mut model = CrosscoderModel::<f32>::random_init(f, cfg.d_model, gt.steps.clone(), 0.1, &mut rng);
    // Plant half the features, scaled by their schedules.
    for i in 0..gt.n_features() {
        for t in 0..gt.n_snapshots() {
            for r in 0..cfg.d_model {
                model.w_dec[t][[r, 2 * i]] = (gt.directions[i][r] * gt.schedules[i][t].max(0.01)) as f32;
            }
        }
    }
    let mut perm: Vec<usize> = (0..f).collect();
    perm.shuffle(&mut rng);
    let mut permuted = model.clone();
    for t in 0..gt.n_snapshots() {
        permuted.w_dec[t] = Array2::from_shape_fn((cfg.d_model, f), |(r, j)| model.w_dec[t][[r, perm[j]]]);
    }
    let key = |m: &CrosscoderModel<f32>| {
        let rep = match_features(m, &gt).unwrap();
        let mut v: Vec<(u64, Option<u64>)> =
            rep.matches.iter().map(|x| (x.cosine.to_bits(), x.pearson.map(f64::to_bits))).collect();
        v.sort_unstable();
        v
    };
    assert_eq!(key(&model), key(&permuted));
    let rep = match_features(&model, &gt).unwrap();
    assert!(rep.fraction_matched(0.999) == 1.0);
}

fn small_cfg() -> SynthConfig {
    SynthConfig {
        d_model: 16,
        n_true_features: 20,
        n_snapshots: 3,
        n_tokens: 4000,
        shard_tokens: 2000,
        vocab_size: 100,
        ..SynthConfig::default()
    }
}

#[test]
fn single_causal_feature_is_the_only_difference() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg();
    let gt = ground_truth(&cfg, 4).unwrap();
    let data = write_dataset(&cfg, gt, dir.path().join("data")).unwrap();
    let task = TaskConfig {
        n_pairs: 40,
        n_causal: 1,
        causal_fire_prob: 1.0,
        ..TaskConfig::default()
    };
    let out = generate_task(&cfg, &data.ground_truth, &task, 4, dir.path().join("task")).unwrap();
    let c = out.truth.causal[0];
    let manifest = featrace_core::SnapshotManifest::load(&out.manifest_path).unwrap();
    let samples = load_task(&manifest, &read_task_file(&out.task_path).unwrap()).unwrap();
    let g = &data.ground_truth.directions[c];
    let t = out.truth.snapshot;
    for s in &samples {
        let diff = &s.clean[t] - &s.corrupted.as_ref().unwrap()[t];
        let along: f64 = diff.iter().zip(g).map(|(a, b)| a * b).sum();
        let resid = diff.iter().zip(g).map(|(a, b)| (a - along * b).powi(2)).sum::<f64>().sqrt();
        assert!(along > 0.0);
        assert!(resid <= 1e-5 * along.abs().max(1.0), "residual {resid}, along {along}");
        // Only the causal direction moves the head.
        let head_delta = out.truth.head.value(s.clean[t].view()) - out.truth.head.value(s.corrupted.as_ref().unwrap()[t].view());
        assert!((head_delta - along).abs() < 1e-4 * along.max(1.0));
    }
    match &out.truth.head {
        MetricHead::Affine { v, offset } => {
            assert_eq!(*offset, 0.0);
            assert!(v.iter().zip(g).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        other => panic!("expected an affine head, got {other:?}"),
    }
}

#[test]
fn identical_pair_has_zero_patching_attribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = CrosscoderModel::<f64>::random_init(8, 5, vec![1, 10], 0.01, &mut rng);
    let row = |rng: &mut ChaCha8Rng| ndarray::Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
    let clean = vec![row(&mut rng), row(&mut rng)];
    let s = TaskSample {
        clean: clean.clone(),
        corrupted: Some(clean),
        label: String::new(),
    };
    let head = MetricHead::Mlp1 {
        w1: vec![vec![0.3; 5], vec![-0.2; 5]],
        b1: vec![0.0, 0.1],
        w2: vec![1.0, -1.0],
        b2: 0.0,
    };
    for v in [Variant::Patching, Variant::IgPatching] {
        let a = attribution_scores(&model, 1, &head, &s, v, 10).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn rule_stream_classes_are_recovered() {
    let streams = rule_streams(40, 12);
    let verdicts = classify_index(&streams.index, &streams.vocab);
    for class in [RuleClass::PreviousToken, RuleClass::Induction, RuleClass::ContextSensitive] {
        let tp = verdicts.iter().zip(&streams.labels).filter(|(v, &l)| v.class == class && l == class).count();
        let predicted = verdicts.iter().filter(|v| v.class == class).count();
        let actual = streams.labels.iter().filter(|&&l| l == class).count();
        let precision = tp as f64 / predicted.max(1) as f64;
        let recall = tp as f64 / actual as f64;
        assert!(precision >= 0.9 && recall >= 0.9, "{class:?}: precision {precision}, recall {recall}");
    }
}
