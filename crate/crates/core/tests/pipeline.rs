use std::sync::OnceLock;

use affordance::dataset::{load_dataset, normalized_poses, synth_generate, LabelMode, SceneRecord};
use affordance::heads::{HeadKind, DEFORM_LIMIT, SCALE_RANGE};
use affordance::mcma::AttentionMode;
use affordance::pipeline::{
    ablation_grid, prepare, score_samples, ContextModality, FeatureExtractor, Pipeline, PipelineConfig, SampleSet,
    SampledPose, Source, TrainingSet,
};
use affordance::pose::NUM_KEYPOINTS;
use affordance::templates::kmedoids;
use affordance::transform::FRAME;
use affordance::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    _dir: tempfile::TempDir,
    records: Vec<SceneRecord>,
    pipeline: Pipeline,
    before: Vec<f32>,
}

fn small() -> PipelineConfig {
    let mut cfg = PipelineConfig { templates: 3, hidden: 16, latent: 4, epochs: 2, batch: 8, ..PipelineConfig::default() };
    cfg.attention.heads = 2;
    cfg.attention.head_dim = 4;
    cfg.attention.fused_channels = 8;
    cfg.attention.context_channels = 8;
    cfg
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        synth_generate(dir.path(), 21, 6).unwrap();
        let mut records = load_dataset(dir.path()).unwrap();
        let cfg = small();
        let bank = kmedoids(&normalized_poses(&records).unwrap(), cfg.templates).unwrap();
        prepare(&mut records, &bank, &cfg).unwrap();
        let mut fx = FeatureExtractor::new(&cfg.backbone, cfg.mapping().unwrap()).unwrap();
        let before = fx.global(&records[0], Source::Image).unwrap().data().to_vec();
        let set = TrainingSet::build(&records, &cfg, &mut fx).unwrap();
        let mut pipeline = Pipeline::new(cfg, bank).unwrap();
        pipeline.train(&set, None).unwrap();
        Fixture { _dir: dir, records, pipeline, before }
    })
}

fn fresh_fx(p: &Pipeline) -> FeatureExtractor {
    FeatureExtractor::new(&p.config.backbone, p.config.mapping().unwrap()).unwrap()
}

#[test]
fn contradictory_configs_are_rejected() {
    let bad = [
        PipelineConfig { templates: 0, ..PipelineConfig::default() },
        PipelineConfig { batch: 0, ..PipelineConfig::default() },
        PipelineConfig { kl_weight: -1.0, ..PipelineConfig::default() },
        PipelineConfig { alpha: 0.0, ..PipelineConfig::default() },
        PipelineConfig { beta: 1.5, ..PipelineConfig::default() },
        PipelineConfig { modality: ContextModality::Depth, labels: LabelMode::Two, ..PipelineConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
    PipelineConfig::default().validate().unwrap();
    PipelineConfig::full().validate().unwrap();

    let fixed = PipelineConfig { fixed_template: true, ..PipelineConfig::default() };
    match fixed.check_head(HeadKind::Classifier) {
        Err(Error::Config(msg)) => assert!(msg.contains("classifier")),
        other => panic!("{other:?}"),
    }
    let unified = PipelineConfig { unified: true, ..PipelineConfig::default() };
    assert!(unified.check_head(HeadKind::Scale).is_err());
    assert_eq!(unified.active_heads(), [HeadKind::Location, HeadKind::Classifier, HeadKind::Unified]);
}

#[test]
fn partial_json_fills_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"templates": 7, "attention": {"mode": "none"}, "labels": "3"}"#).unwrap();
    let cfg = PipelineConfig::load(&path).unwrap();
    assert_eq!(cfg.templates, 7);
    assert_eq!(cfg.attention.mode, AttentionMode::None);
    assert_eq!(cfg.labels, LabelMode::Three);
    assert_eq!(cfg.epochs, PipelineConfig::default().epochs);
    cfg.save(&path).unwrap();
    assert_eq!(PipelineConfig::load(&path).unwrap(), cfg);
    std::fs::write(&path, r#"{"templates": "many"}"#).unwrap();
    assert!(matches!(PipelineConfig::load(&path), Err(Error::Config(_))));
}

#[test]
fn ablation_grid_covers_every_cell_once() {
    let grid = ablation_grid(&PipelineConfig::default());
    assert_eq!(grid.len(), 18);
    let labels: std::collections::BTreeSet<_> = grid.iter().map(|c| c.label.as_str()).collect();
    assert_eq!(labels.len(), 18);
    for mode in AttentionMode::ALL {
        for modality in ["semantic", "depth"] {
            assert!(labels.contains(format!("{mode}/{modality}").as_str()));
        }
    }
    for cell in &grid {
        cell.config.validate().unwrap();
    }
}

#[test]
fn untrained_heads_are_reported_by_name() {
    let f = fixture();
    let empty = Pipeline::new(f.pipeline.config.clone(), f.pipeline.bank.clone()).unwrap();
    match empty.sample_scene(&mut fresh_fx(&empty), &f.records[0], 2, &mut ChaCha8Rng::seed_from_u64(0)) {
        Err(Error::State(msg)) => assert!(msg.contains("location"), "{msg}"),
        other => panic!("{:?}", other.map(|s| s.samples.len())),
    }
}

#[test]
fn samples_respect_the_output_contract() {
    let f = fixture();
    let p = &f.pipeline;
    let mut fx = fresh_fx(p);
    for rec in &f.records[..3] {
        let set = p.sample_scene(&mut fx, rec, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(set.samples.len(), 5);
        let dims = rec.dims();
        for s in &set.samples {
            assert!(s.class < p.config.templates);
            assert!((0.0..=dims.width).contains(&s.center[0]) && (0.0..=dims.height).contains(&s.center[1]));
            assert!(s.scale.iter().all(|v| (SCALE_RANGE.0..=SCALE_RANGE.1).contains(v)));
            assert_eq!(s.keypoints.len(), NUM_KEYPOINTS);
            assert!(s.keypoints.iter().flatten().all(|v| v.is_finite()));
            // every keypoint sits within the clamped box plus the clamped deformation
            let pad = [
                (s.scale[0] / 2.0 + DEFORM_LIMIT) * dims.width / FRAME,
                (s.scale[1] / 2.0 + DEFORM_LIMIT) * dims.height / FRAME,
            ];
            for k in &s.keypoints {
                assert!((k[0] - s.center[0]).abs() <= pad[0] + 1e-6 && (k[1] - s.center[1]).abs() <= pad[1] + 1e-6);
            }
        }
        let again = p.sample_scene(&mut fx, rec, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(serde_json::to_string(&set).unwrap(), serde_json::to_string(&again).unwrap());
    }
}

#[test]
fn saved_runs_reload_identically() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    f.pipeline.save(dir.path()).unwrap();
    let back = Pipeline::load(dir.path()).unwrap();
    assert_eq!(back.config, f.pipeline.config);
    let draw = |p: &Pipeline| {
        let set = p.sample_scene(&mut fresh_fx(p), &f.records[1], 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        serde_json::to_string(&set).unwrap()
    };
    assert_eq!(draw(&f.pipeline), draw(&back));
    std::fs::remove_file(dir.path().join("deform.ckpt")).unwrap();
    match Pipeline::load(dir.path()).and_then(|p| p.check_complete()) {
        Err(e) => assert!(e.to_string().contains("deform"), "{e}"),
        Ok(()) => panic!("loaded a run without its deform head"),
    }
}

#[test]
fn backbone_stays_frozen_through_training() {
    let f = fixture();
    let mut fx = fresh_fx(&f.pipeline);
    assert_eq!(fx.global(&f.records[0], Source::Image).unwrap().data(), &f.before[..]);
}

#[test]
fn perfect_samples_score_perfectly() {
    let f = fixture();
    let rec = &f.records[2];
    let samples = rec
        .poses
        .iter()
        .map(|p| {
            let [x0, y0, x1, y1] = p.bbox();
            SampledPose { center: [(x0 + x1) / 2.0, (y0 + y1) / 2.0], class: 0, scale: [1.0, 1.0], keypoints: p.keypoints.to_vec() }
        })
        .collect();
    let set = SampleSet { scene: rec.id().into(), samples };
    let rows = score_samples(&set, rec, 0.2, 0.5).unwrap();
    assert_eq!(rows.len(), rec.poses.len());
    for r in rows {
        assert_eq!((r.pck, r.akd, r.mse), (Some(1.0), 0.0, 0.0));
        assert!((r.iou.unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn datasets_sharing_scene_ids_do_not_share_features() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth_generate(a.path(), 1, 1).unwrap();
    synth_generate(b.path(), 2, 1).unwrap();
    let (ra, rb) = (load_dataset(a.path()).unwrap(), load_dataset(b.path()).unwrap());
    assert_eq!(ra[0].id(), rb[0].id());
    let cfg = PipelineConfig::default();
    let mut shared = FeatureExtractor::new(&cfg.backbone, cfg.mapping().unwrap()).unwrap();
    let fa = shared.global(&ra[0], Source::Image).unwrap();
    let fb = shared.global(&rb[0], Source::Image).unwrap();
    assert_ne!(fa.data(), fb.data());
    let [pa, _] = shared.patches(&ra[0], Source::Image, [128.0, 128.0], Some("gt0")).unwrap();
    let [pb, _] = shared.patches(&rb[0], Source::Image, [128.0, 128.0], Some("gt0")).unwrap();
    assert_ne!(pa.data(), pb.data());
}
