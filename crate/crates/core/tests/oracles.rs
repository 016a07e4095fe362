//! Cross-checks against independent reference computations.

use std::collections::BTreeMap;

use drivedit_core::backends::BackendSet;
use drivedit_core::embed::MockEmbedder;
use drivedit_core::image::{BBox, Image};
use drivedit_core::langmask::{build_langmask, BinaryMask};
use drivedit_core::maskio::{decode_mask, encode_mask};
use drivedit_core::pairing::{pair_logs, pose_distance, PairResult, PairingConfig};
use drivedit_core::poisson::{laplacian_residual, poisson_blend, PoissonConfig};
use drivedit_core::pseudogen::{make_local_pair, rng_for, sample_global_edit, LocalConfig};
use drivedit_core::types::{
    ClassLabel, EditAction, EditSpec, FramePose, GlobalAttributes, InstanceRecord, SceneAnnotation, SceneType, Season,
    TimeOfDay, Weather,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn random_log(seed: u64, per_traversal: usize) -> Vec<FramePose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::new();
    for t in ["t0", "t1"] {
        for i in 0..per_traversal {
            let s = i as f64 * 0.8;
            log.push(FramePose {
                position: [
                    s + rng.gen_range(-0.6..0.6),
                    rng.gen_range(-0.6..0.6),
                    rng.gen_range(-0.05..0.05),
                ],
                roll: rng.gen_range(-0.05..0.05),
                pitch: rng.gen_range(-0.05..0.05),
                yaw: rng.gen_range(-0.3..0.3),
                timestamp: i as i64,
                traversal_id: t.into(),
                frame_id: format!("{i:04}"),
            });
        }
    }
    log
}

fn exhaustive(log: &[FramePose], threshold: f64) -> Vec<PairResult> {
    let mut out = Vec::new();
    for s in log {
        let mut best: Option<(f64, &FramePose)> = None;
        for c in log.iter().filter(|c| c.traversal_id != s.traversal_id) {
            let d = pose_distance(s, c).unwrap();
            let better = match best {
                None => true,
                Some((bd, b)) => d < bd || (d == bd && (&c.traversal_id, &c.frame_id) < (&b.traversal_id, &b.frame_id)),
            };
            if better {
                best = Some((d, c));
            }
        }
        if let Some((d, c)) = best {
            if d <= threshold {
                out.push(PairResult {
                    source_traversal_id: s.traversal_id.clone(),
                    source_frame_id: s.frame_id.clone(),
                    target_traversal_id: c.traversal_id.clone(),
                    target_frame_id: c.frame_id.clone(),
                    distance: d,
                    accepted: true,
                });
            }
        }
    }
    out
}

#[test]
fn grid_pairing_equals_exhaustive_search() {
    for seed in 0..10 {
        let log = random_log(seed, 200);
        let cfg = PairingConfig::default();
        let fast = pair_logs(&log, &cfg).unwrap();
        assert!(!fast.is_empty());
        assert_eq!(fast, exhaustive(&log, cfg.distance_threshold), "seed {seed}");
    }
}

/// Dense solve of the 25-unknown Dirichlet problem for a 5×5 region.
#[test]
fn poisson_matches_dense_solve() {
    let (w, h) = (9, 9);
    let target = Image::from_fn(w, h, |x, y| {
        [
            0.2 + 0.05 * x as f64,
            0.6 - 0.03 * y as f64,
            0.1 + 0.02 * (x * y) as f64 / 8.0,
        ]
    });
    let source = Image::from_fn(w, h, |x, y| [0.1 * x as f64, 0.05 * y as f64, 0.5 + 0.04 * x as f64]);
    let region_box = BBox::new(2, 2, 7, 7);
    let region = BinaryMask::from_boxes(w, h, [&region_box]);
    let out = poisson_blend(&target, &source, &region, &PoissonConfig::default()).unwrap();

    let idx = |x: usize, y: usize| (y - 2) * 5 + (x - 2);
    for c in 0..3 {
        let mut a = DMatrix::<f64>::zeros(25, 25);
        let mut b = DVector::<f64>::zeros(25);
        for (x, y) in region_box.pixels() {
            let i = idx(x, y);
            a[(i, i)] = 4.0;
            let mut rhs = 4.0 * source.get(x, y, c);
            for (nx, ny) in [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)] {
                rhs -= source.get(nx, ny, c);
                if region_box.contains(nx, ny) {
                    a[(i, idx(nx, ny))] = -1.0;
                } else {
                    rhs += target.get(nx, ny, c);
                }
            }
            b[i] = rhs;
        }
        let sol = a.lu().solve(&b).expect("nonsingular");
        for (x, y) in region_box.pixels() {
            let got = out.image.get(x, y, c);
            assert!(
                (got - sol[idx(x, y)]).abs() < 1e-3,
                "({x},{y},{c}) {got} vs {}",
                sol[idx(x, y)]
            );
        }
    }
}

#[test]
fn random_blends_converge_with_small_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (w, h) = (rng.gen_range(12..30), rng.gen_range(12..30));
        let target = Image::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let source = Image::from_fn(w, h, |x, y| [x as f64 / w as f64, y as f64 / h as f64, 0.5]);
        let x0 = rng.gen_range(1..w as u32 / 2);
        let y0 = rng.gen_range(1..h as u32 / 2);
        let b = BBox::new(x0, y0, rng.gen_range(x0 + 1..w as u32), rng.gen_range(y0 + 1..h as u32));
        let region = BinaryMask::from_boxes(w, h, [&b]);
        let start = std::time::Instant::now();
        let out = poisson_blend(&target, &source, &region, &PoissonConfig::default()).unwrap();
        assert!(start.elapsed().as_secs_f64() < 1.0);
        assert!(laplacian_residual(&out.image, &source, &region) < 1e-3);
    }
}

fn spec_strategy(w: u32, h: u32) -> impl Strategy<Value = EditSpec> {
    (0..w - 1, 0..h - 1, 1..w, 1..h, 0u32..60, 0usize..4).prop_map(move |(x0, y0, bw, bh, d, k)| {
        let x1 = (x0 + bw).min(w);
        let y1 = (y0 + bh).min(h);
        let action = EditAction::ALL[k];
        EditSpec {
            action,
            subject_class: ClassLabel::Car,
            bbox: BBox::new(x0, y0, x1.max(x0 + 1), y1.max(y0 + 1)),
            target_description: action.needs_target().then(|| "red".to_string()),
            distance_m: d as f64 * 1.5,
            instruction_sentence: format!("{} car at {x0},{y0} d{d}", action.as_str()),
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// Every covered pixel holds the embedding of the nearest covering spec.
    #[test]
    fn nearest_spec_wins(specs in prop::collection::vec(spec_strategy(24, 18), 1..6), seed in 0u64..1000) {
        let e = MockEmbedder::new(8, 1);
        let mask = build_langmask(&specs, 24, 18, &e).unwrap();
        for y in 0..18usize {
            for x in 0..24usize {
                let covering: Vec<&EditSpec> = specs.iter().filter(|s| s.bbox.contains(x, y)).collect();
                if covering.is_empty() {
                    prop_assert!(mask.pixel(x, y).iter().all(|&v| v == 0.0));
                    continue;
                }
                let dmin = covering.iter().map(|s| s.distance_m).fold(f64::INFINITY, f64::min);
                let nearest: Vec<&&EditSpec> = covering.iter().filter(|s| s.distance_m == dmin).collect();
                // Unique nearest: exact embedding match.
                if nearest.len() == 1 {
                    let want = drivedit_core::EmbeddingProvider::text_embed(&e, &nearest[0].instruction_sentence).unwrap();
                    prop_assert_eq!(mask.pixel(x, y), &want[..]);
                }
            }
        }
        let mut shuffled = specs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let again = build_langmask(&shuffled, 24, 18, &e).unwrap();
        prop_assert_eq!(again.data(), mask.data());
        let bytes = encode_mask(&mask).unwrap();
        prop_assert_eq!(decode_mask(&bytes).unwrap(), mask);
    }
}

fn sunny_scene() -> SceneAnnotation {
    SceneAnnotation {
        image_id: "s".into(),
        width: 24,
        height: 24,
        global: Some(GlobalAttributes {
            weather: Weather::Sunny,
            time_of_day: TimeOfDay::Day,
            season: Season::Summer,
            scene_type: SceneType::Urban,
        }),
        instances: vec![InstanceRecord {
            instance_id: "s/0".into(),
            class_label: ClassLabel::Car,
            bbox: BBox::new(7, 8, 17, 16),
            distance_m: Some(12.0),
            attributes: [("color".to_string(), "white".to_string())].into(),
        }],
        caption: "a car on a road".into(),
        caption_paraphrases: vec![],
        missing: vec![],
    }
}

#[test]
fn weather_resampling_is_uniform() {
    let ann = sunny_scene();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut n = 0u64;
    while n < 10_000 {
        let d = sample_global_edit(&ann, &mut rng).unwrap();
        if d.category != drivedit_core::types::GlobalCategory::Weather {
            continue;
        }
        assert_ne!(d.to_value, "Sunny");
        *counts.entry(d.to_value).or_default() += 1;
        n += 1;
    }
    assert_eq!(counts.len(), 4);
    let expected = n as f64 / 4.0;
    let stat: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(stat);
    assert!(p > 0.01, "chi2 {stat} p {p}");
    for &c in counts.values() {
        assert!((c as f64 / n as f64 - 0.25).abs() < 0.03);
    }
}

#[test]
fn deletion_role_swap_is_balanced() {
    let ann = sunny_scene();
    let image = Image::from_fn(24, 24, |x, y| {
        if (8..16).contains(&x) && (9..15).contains(&y) {
            [0.9, 0.9, 0.9]
        } else {
            [0.3, 0.32, 0.3]
        }
    });
    let backends = BackendSet::mock();
    let cfg = LocalConfig {
        action_pool: vec![EditAction::Delete],
        ..Default::default()
    };
    let trials = 10_000;
    let mut swapped = 0;
    for t in 0..trials {
        let pair = make_local_pair(&image, &ann, &backends, &cfg, &mut rng_for(t, "s")).unwrap();
        swapped += pair.provenance.pseudo_is_target as u32;
    }
    let freq = swapped as f64 / trials as f64;
    assert!((freq - 0.5).abs() <= 0.02, "{freq}");
}
