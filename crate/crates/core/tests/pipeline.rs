use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stillfast_core::datamodel::{read_predictions, serialize_predictions, PredictionSet, SamplePredictions, StaPrediction};
use stillfast_core::dataset::{generate_synthetic, DatasetDir, Mode, PreprocessConfig, SynthSceneSpec, ANNOTATION_FILE};
use stillfast_core::metrics::{evaluate, EvalSettings};

fn toy_preprocess() -> PreprocessConfig {
    PreprocessConfig {
        train_short_sides: vec![96, 128, 160],
        max_long_side: 256,
        test_height: 128,
        alpha: 0.5,
        clip_len: 8,
        ..PreprocessConfig::default()
    }
}

#[test]
fn ground_truth_written_as_predictions_scores_one_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let set = generate_synthetic(&SynthSceneSpec::default(), 4, dir.path()).unwrap();
    let preds = PredictionSet {
        samples: set
            .samples
            .iter()
            .map(|s| SamplePredictions {
                uid: s.uid.clone(),
                predictions: s
                    .annotations
                    .iter()
                    .map(|a| StaPrediction {
                        bbox: a.bbox,
                        noun_id: a.noun_id,
                        verb_id: a.verb_id,
                        ttc: a.ttc,
                        score: 0.9,
                    })
                    .collect(),
            })
            .collect(),
    };
    let path = dir.path().join("preds.json");
    serialize_predictions(&preds, &path).unwrap();
    assert_eq!(read_predictions(&path).unwrap(), preds);
    let report = evaluate(&path, &dir.path().join(ANNOTATION_FILE), &EvalSettings::default()).unwrap();
    assert_eq!(report.values(), [100.0; 4]);
    assert_eq!(report.counts.samples, 4);
}

#[test]
fn preprocessed_samples_keep_boxes_inside_the_frame() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&SynthSceneSpec::default(), 6, dir.path()).unwrap();
    let cfg = toy_preprocess();
    let ds = DatasetDir::open(dir.path()).unwrap();
    let raw = ds.load_raw(cfg.clip_len, cfg.clip_stride).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mode in [Mode::Train, Mode::Eval] {
        for r in &raw {
            let s = r.preprocess(&cfg, mode, 8.0, &mut rng).unwrap();
            let (h, w) = s.clip.still_size();
            let (_, t, vh, _) = s.clip.video.cthw();
            assert_eq!(t, cfg.clip_len);
            assert_eq!(vh, (h as f64 * cfg.alpha).round() as usize);
            if mode == Mode::Eval {
                assert_eq!(h, 128);
            }
            for a in &s.annotations {
                assert!(a.bbox.x1 >= 0.0 && a.bbox.y1 >= 0.0);
                assert!(a.bbox.x2 <= w as f64 + 1e-9 && a.bbox.y2 <= h as f64 + 1e-9);
                // Scaling back lands on the raw box.
                let raw_box = r.record.annotations[0].bbox;
                let back = a.bbox.scaled(128.0 / w as f64, 128.0 / h as f64);
                assert!(back.iou(&raw_box) > 0.95);
            }
        }
    }
}

#[test]
fn preprocessing_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&SynthSceneSpec::default(), 2, dir.path()).unwrap();
    let cfg = toy_preprocess();
    let raw = DatasetDir::open(dir.path()).unwrap().load_raw(cfg.clip_len, 1).unwrap();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        raw.iter()
            .map(|r| r.preprocess(&cfg, Mode::Train, 8.0, &mut rng).unwrap())
            .map(|s| (s.clip.still, s.clip.video, s.annotations))
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
