use drivedit_core::evalkit::{pixel_metrics, Providers, Region};
use drivedit_core::{build_langmask, BBox, ClassLabel, EditAction, EditSpec, EditType, LangMask, MockEmbedder};
use drivedit_train::synth::SIZE;
use drivedit_train::trainer::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use drivedit_train::{
    evaluate_checkpoint, make_synthetic_dataset, train, GeneratorContract, ToyPerceptual, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn window(log: &[drivedit_train::trainer::StepRecord]) -> (f64, f64) {
    let first = log[..10].iter().map(|r| r.loss.sft).sum::<f64>() / 10.0;
    let last = log[log.len() - 10..].iter().map(|r| r.loss.sft).sum::<f64>() / 10.0;
    (first, last)
}

fn stage1_only(steps: usize) -> TrainConfig {
    TrainConfig {
        stage1_steps: steps,
        stage2_steps: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn stage_one_descends_and_preserves_identity() {
    let cfg = stage1_only(500);
    let enc = cfg.text_encoder();
    let data = make_synthetic_dataset(256, 0, enc.as_ref()).unwrap();
    let phi = ToyPerceptual::new(cfg.perceptual_seed);
    let out = train(&cfg, &data, &phi, |_| Ok(())).unwrap();
    assert_eq!(out.log.len(), 500);
    let (first, last) = window(&out.log);
    assert!(last <= 0.5 * first, "first {first:.4} last {last:.4}");

    let heldout = make_synthetic_dataset(60, 1, enc.as_ref()).unwrap();
    let clip = MockEmbedder::new(16, 9);
    let dino = MockEmbedder::dino_style(16, 9);
    let providers = Providers {
        clip: &clip,
        dino: &dino,
    };
    let w = cfg.stage1_weights;
    let trained = evaluate_checkpoint(&out.model, &heldout, providers, &phi, &w).unwrap();
    let untrained = evaluate_checkpoint(&cfg.init_model().unwrap(), &heldout, providers, &phi, &w).unwrap();
    assert!(
        trained.mean_sft < untrained.mean_sft,
        "held-out {:.4} vs untrained {:.4}",
        trained.mean_sft,
        untrained.mean_sft
    );
    let id = trained.table.row(EditType::Identity, Region::FullImage).unwrap();
    assert!(id.count > 0);
    assert!(id.mean.l1 <= 0.02, "identity L1 {}", id.mean.l1);
}

#[test]
fn same_seed_gives_identical_curves() {
    let cfg = stage1_only(30);
    let enc = cfg.text_encoder();
    let data = make_synthetic_dataset(40, 3, enc.as_ref()).unwrap();
    let phi = ToyPerceptual::new(0);
    let a = train(&cfg, &data, &phi, |_| Ok(())).unwrap();
    let b = train(&cfg, &data, &phi, |_| Ok(())).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model.params(), b.model.params());
    let other = train(&TrainConfig { seed: 1, ..cfg }, &data, &phi, |_| Ok(())).unwrap();
    assert_ne!(a.log, other.log);
}

fn random_mask(rng: &mut ChaCha8Rng, e: &MockEmbedder) -> LangMask {
    if rng.gen_bool(0.5) {
        let data = (0..SIZE * SIZE * 16)
            .map(|_| {
                if rng.gen_bool(0.3) {
                    rng.gen_range(-1.0..1.0)
                } else {
                    0.0
                }
            })
            .collect();
        return LangMask::from_parts(SIZE, SIZE, 16, data, Vec::new()).unwrap();
    }
    let specs: Vec<EditSpec> = (0..rng.gen_range(1..4))
        .map(|k| {
            let x0 = rng.gen_range(0..50u32);
            let y0 = rng.gen_range(0..50u32);
            EditSpec {
                action: EditAction::Modify,
                subject_class: ClassLabel::Car,
                bbox: BBox::new(x0, y0, x0 + rng.gen_range(2..14), y0 + rng.gen_range(2..14)),
                target_description: Some("red".into()),
                distance_m: 5.0 + k as f64,
                instruction_sentence: format!("change car {k} to shade {}", rng.gen::<u16>()),
            }
        })
        .collect();
    build_langmask(&specs, SIZE, SIZE, e).unwrap()
}

#[test]
fn untrained_model_ignores_the_mask() {
    let cfg = TrainConfig::default();
    let model = cfg.init_model().unwrap();
    let e = MockEmbedder::new(16, 5);
    let data = make_synthetic_dataset(5, 2, &e).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..100 {
        let s = &data[i % data.len()];
        let blank = LangMask::blank(SIZE, SIZE, 16);
        let base = model.apply(&s.source_image, &s.forward_instruction, &blank).unwrap();
        let m = random_mask(&mut rng, &e);
        let out = model.apply(&s.source_image, &s.forward_instruction, &m).unwrap();
        let linf = base
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert_eq!(linf, 0.0, "mask {i}");
        assert_eq!(out, s.source_image);
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let cfg = TrainConfig {
        stage1_steps: 3,
        stage2_steps: 2,
        ..TrainConfig::default()
    };
    let enc = cfg.text_encoder();
    let data = make_synthetic_dataset(10, 4, enc.as_ref()).unwrap();
    let phi = ToyPerceptual::new(0);
    let out = train(&cfg, &data, &phi, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&out.model, &cfg.text_encoder, 5, &path).unwrap();
    let (loaded, manifest) = load_checkpoint(&path).unwrap();
    assert_eq!(manifest.steps, 5);
    assert_eq!(manifest.shape, cfg.shape);
    let bits = |p: &[f64]| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(loaded.params()), bits(out.model.params()));
    let s = &data[0];
    assert_eq!(
        loaded
            .apply(&s.source_image, &s.forward_instruction, &s.forward_mask)
            .unwrap(),
        out.model
            .apply(&s.source_image, &s.forward_instruction, &s.forward_mask)
            .unwrap()
    );

    let mut bytes = encode_checkpoint(&out.model, &cfg.text_encoder, 5).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(decode_checkpoint(&bytes).is_err());
    assert!(decode_checkpoint(b"NOPE").is_err());
}

#[test]
fn zero_steps_returns_the_initial_model() {
    let cfg = stage1_only(0);
    let enc = cfg.text_encoder();
    let data = make_synthetic_dataset(5, 0, enc.as_ref()).unwrap();
    let out = train(&cfg, &data, &ToyPerceptual::new(0), |_| Ok(())).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.model.params(), cfg.init_model().unwrap().params());
    assert!(train(&stage1_only(0), &[], &ToyPerceptual::new(0), |_| Ok(())).is_ok());
    assert!(train(&stage1_only(1), &[], &ToyPerceptual::new(0), |_| Ok(())).is_err());
}

#[test]
fn stage_two_logs_cycle_and_clip_terms() {
    let cfg = TrainConfig {
        stage1_steps: 2,
        stage2_steps: 3,
        ..TrainConfig::default()
    };
    let enc = cfg.text_encoder();
    let data = make_synthetic_dataset(10, 6, enc.as_ref()).unwrap();
    let out = train(&cfg, &data, &ToyPerceptual::new(0), |_| Ok(())).unwrap();
    let stages: Vec<u8> = out.log.iter().map(|r| r.stage).collect();
    assert_eq!(stages, vec![1, 1, 2, 2, 2]);
    for r in &out.log[..2] {
        assert_eq!(r.loss.cycle, 0.0);
        assert_eq!(r.loss.clip, 0.0);
    }
    for r in &out.log[2..] {
        assert!(r.loss.cycle > 0.0);
        assert!(r.loss.clip != 0.0);
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let cfg = stage1_only(5);
    let enc = cfg.text_encoder();
    let mut data = make_synthetic_dataset(4, 0, enc.as_ref()).unwrap();
    for s in &mut data {
        s.target_image.put_pixel(3, 3, [f64::NAN, 0.0, 0.0]);
    }
    let mut seen = 0;
    let err = train(&cfg, &data, &ToyPerceptual::new(0), |_| {
        seen += 1;
        Ok(())
    })
    .unwrap_err();
    assert_eq!(seen, 0);
    assert!(err.to_string().contains("non-finite"), "{err}");
}

#[test]
fn untrained_model_scores_zero_on_identity_samples() {
    let cfg = TrainConfig::default();
    let enc = cfg.text_encoder();
    let data: Vec<_> = make_synthetic_dataset(20, 8, enc.as_ref())
        .unwrap()
        .into_iter()
        .filter(|s| s.edit_type == EditType::Identity)
        .collect();
    assert!(!data.is_empty());
    let clip = MockEmbedder::new(16, 1);
    let dino = MockEmbedder::dino_style(16, 1);
    let report = evaluate_checkpoint(
        &cfg.init_model().unwrap(),
        &data,
        Providers {
            clip: &clip,
            dino: &dino,
        },
        &ToyPerceptual::new(0),
        &cfg.stage1_weights,
    )
    .unwrap();
    let row = report.table.row(EditType::Identity, Region::FullImage).unwrap();
    assert_eq!(row.mean.l1, 0.0);
    assert_eq!(row.mean.l2, 0.0);
    assert!((row.mean.clip - 1.0).abs() < 1e-12);
    assert_eq!(report.mean_sft, 0.0);
}

#[test]
fn synthetic_dataset_invariants() {
    let e = MockEmbedder::new(16, 0);
    let data = make_synthetic_dataset(1000, 21, &e).unwrap();
    assert_eq!(data.len(), 1000);
    for (i, s) in data.iter().enumerate() {
        assert_eq!(s.source_image.dims(), (SIZE, SIZE));
        assert_eq!(s.target_image.dims(), (SIZE, SIZE));
        for img in [&s.source_image, &s.target_image] {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)), "sample {i}");
        }
        match s.edit_type {
            EditType::Identity => {
                assert_eq!(s.source_image, s.target_image);
                assert!(s.forward_mask.is_blank() && s.backward_mask.is_blank());
            }
            EditType::Global => {
                assert!(s.forward_mask.is_blank() && s.backward_mask.is_blank());
                assert_ne!(s.forward_instruction, s.backward_instruction);
                assert!(pixel_metrics(&s.source_image, &s.target_image).unwrap().0 > 0.0);
            }
            EditType::Local => {
                let support = s.forward_mask.project_binary();
                assert!(support.count() > 0);
                assert_eq!(support, s.backward_mask.project_binary());
                for y in 0..SIZE {
                    for x in 0..SIZE {
                        if !support.get(x, y) {
                            assert_eq!(s.source_image.pixel(x, y), s.target_image.pixel(x, y));
                        }
                    }
                }
                assert_ne!(s.source_image, s.target_image, "sample {i}");
            }
            EditType::Compound => panic!("synthetic data has no compound edits"),
        }
    }
}
