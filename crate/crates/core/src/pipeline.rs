//! End-to-end pipeline: feature caching, per-head training, the four-stage
//! sampler (location → template class → scale → deformation), evaluation,
//! and the ablation grid.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec, Modality, FEATURE_CHANNELS};
use crate::dataset::{extract_patch, patch_sides, LabelMapping, LabelMode, SceneRecord};
use crate::error::{Error, Result};
use crate::heads::{
    argmax, clamp_deform, clamp_location, clamp_scale, log_csv, train_head, EpochLog, HeadData, HeadInput, HeadKind,
    HeadModel, HeadSpec, TrainOptions,
};
use crate::mcma::{AttentionConfig, AttentionMode, TOKENS};
use crate::metrics::{EvalReport, MetricRow, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::pose::{Pose, NUM_KEYPOINTS};
use crate::raster::Raster;
use crate::templates::TemplateBank;
use crate::tensor::Tensor;
use crate::transform::{apply_transform, SceneDims, TransformParams, FRAME};

pub const CONFIG_FILE: &str = "config.json";
pub const TEMPLATES_FILE: &str = "templates.json";

/// Second modality paired with the scene image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextModality {
    Semantic,
    Depth,
}

impl fmt::Display for ContextModality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextModality::Semantic => "semantic",
            ContextModality::Depth => "depth",
        })
    }
}

impl FromStr for ContextModality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(ContextModality::Semantic),
            "depth" => Ok(ContextModality::Depth),
            _ => Err(Error::Config(format!("modality must be 'semantic' or 'depth', got '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub attention: AttentionConfig,
    pub modality: ContextModality,
    pub labels: LabelMode,
    /// Template count `m`.
    pub templates: usize,
    /// Skip the classifier and always use template 0.
    pub fixed_template: bool,
    /// One joint scale+deformation head instead of two.
    pub unified: bool,
    pub hidden: usize,
    pub latent: usize,
    pub kl_weight: f64,
    pub squared_mse: bool,
    pub backbone: BackboneSpec,
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Optional JSON raw-label mapping; the built-in table otherwise.
    pub label_mapping: Option<PathBuf>,
}

impl Default for PipelineConfig {
    /// Reduced attention widths and four templates, sized for one CPU core.
    fn default() -> Self {
        PipelineConfig {
            attention: AttentionConfig {
                heads: 4,
                head_dim: 8,
                fused_channels: 32,
                context_channels: 32,
                ..AttentionConfig::default()
            },
            modality: ContextModality::Semantic,
            labels: LabelMode::Eight,
            templates: 4,
            fixed_template: false,
            unified: false,
            hidden: 128,
            latent: 32,
            kl_weight: 1.0,
            squared_mse: true,
            backbone: BackboneSpec::default(),
            seed: 0,
            epochs: 30,
            batch: 32,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            label_mapping: None,
        }
    }
}

impl PipelineConfig {
    /// Full widths: 8 heads of 64, 512 fused channels, 30 templates, 200 epochs.
    pub fn full() -> Self {
        PipelineConfig { attention: AttentionConfig::default(), templates: 30, epochs: 200, ..PipelineConfig::default() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.templates == 0 {
            return Err(Error::Config("template count must be positive".into()));
        }
        if self.hidden == 0 || self.latent == 0 {
            return Err(Error::Config("hidden and latent widths must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl weight must be nonnegative".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        if self.modality == ContextModality::Depth && self.labels != LabelMode::Eight {
            return Err(Error::Config("label granularity only applies to the semantic modality".into()));
        }
        Ok(())
    }

    pub fn active_heads(&self) -> Vec<HeadKind> {
        let mut heads = vec![HeadKind::Location];
        if !self.fixed_template {
            heads.push(HeadKind::Classifier);
        }
        if self.unified {
            heads.push(HeadKind::Unified);
        } else {
            heads.extend([HeadKind::Scale, HeadKind::Deform]);
        }
        heads
    }

    /// Reject a head this configuration never trains.
    pub fn check_head(&self, kind: HeadKind) -> Result<()> {
        if self.active_heads().contains(&kind) {
            return Ok(());
        }
        let why = match kind {
            HeadKind::Classifier => "fixed-template configurations have no classifier",
            HeadKind::Unified => "the unified head requires unified = true",
            _ => "unified configurations replace the scale and deform heads",
        };
        Err(Error::Config(format!("head '{kind}' is inactive: {why}")))
    }

    pub fn head_spec(&self, kind: HeadKind) -> HeadSpec {
        HeadSpec {
            kind,
            m: self.templates,
            attention: self.attention.clone(),
            hidden: self.hidden,
            latent: self.latent,
            kl_weight: self.kl_weight,
            squared_mse: self.squared_mse,
        }
    }

    fn head_seed(&self, kind: HeadKind) -> u64 {
        let k = match kind {
            HeadKind::Location => 1,
            HeadKind::Classifier => 2,
            HeadKind::Scale => 3,
            HeadKind::Deform => 4,
            HeadKind::Unified => 5,
        };
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)
    }

    pub fn train_options(&self, kind: HeadKind) -> TrainOptions {
        TrainOptions { epochs: self.epochs, batch: self.batch, seed: self.head_seed(kind) ^ 0xA5A5 }
    }

    pub fn mapping(&self) -> Result<LabelMapping> {
        match &self.label_mapping {
            Some(p) => LabelMapping::load(p),
            None => Ok(LabelMapping::default()),
        }
    }
}

/// Which raster a feature map comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Image,
    Semantic(LabelMode),
    Depth,
}

impl Source {
    pub fn context(cfg: &PipelineConfig) -> Source {
        match cfg.modality {
            ContextModality::Semantic => Source::Semantic(cfg.labels),
            ContextModality::Depth => Source::Depth,
        }
    }

    fn modality(self) -> Modality {
        match self {
            Source::Image => Modality::Image,
            Source::Semantic(_) => Modality::Semantic,
            Source::Depth => Modality::Depth,
        }
    }

    fn tag(self) -> String {
        match self {
            Source::Image => "image".into(),
            Source::Semantic(m) => format!("semantic{m}"),
            Source::Depth => "depth".into(),
        }
    }
}

/// Shared `[64, 512]` feature map.
pub type Map = Arc<Tensor<f32>>;

/// Backbone plus a cache of every map computed so far.
pub struct FeatureExtractor {
    backbone: Backbone<f32>,
    mapping: LabelMapping,
    cache: HashMap<String, Map>,
    rasters: HashMap<(String, Source), Arc<Raster>>,
}

impl FeatureExtractor {
    pub fn new(spec: &BackboneSpec, mapping: LabelMapping) -> Result<Self> {
        Ok(FeatureExtractor { backbone: Backbone::from_spec(spec)?, mapping, cache: HashMap::new(), rasters: HashMap::new() })
    }

    pub fn cached(&self) -> usize {
        self.cache.len()
    }

    /// Scene ids repeat across datasets, so cache keys carry the dataset root.
    fn scene_key(rec: &SceneRecord) -> String {
        format!("{}|{}", rec.root.display(), rec.id())
    }

    fn raster(&mut self, rec: &SceneRecord, src: Source) -> Result<Arc<Raster>> {
        let key = (Self::scene_key(rec), src);
        if let Some(r) = self.rasters.get(&key) {
            return Ok(r.clone());
        }
        let r = Arc::new(match src {
            Source::Image => rec.scene()?,
            Source::Semantic(mode) => rec.semantic_mode(mode, &self.mapping)?,
            Source::Depth => rec.depth()?,
        });
        // keep decoded rasters bounded; features are what gets reused
        if self.rasters.len() > 64 {
            self.rasters.clear();
        }
        self.rasters.insert(key, r.clone());
        Ok(r)
    }

    fn run(&self, id: &str, src: Source, img: &Raster) -> Result<Map> {
        let fm = self.backbone.features(id, src.modality(), img)?;
        Ok(Arc::new(fm.values.reshape([TOKENS, FEATURE_CHANNELS])?))
    }

    /// Whole-scene features.
    pub fn global(&mut self, rec: &SceneRecord, src: Source) -> Result<Map> {
        let key = format!("{}|{}|global", Self::scene_key(rec), src.tag());
        if let Some(m) = self.cache.get(&key) {
            return Ok(m.clone());
        }
        let img = self.raster(rec, src)?;
        let m = self.run(rec.id(), src, &img)?;
        self.cache.insert(key, m.clone());
        Ok(m)
    }

    /// Patch A and B features around `center` (scene pixels). `tag` caches the
    /// result and names the precomputed record (`<scene>/<tag>/a|b`).
    pub fn patches(&mut self, rec: &SceneRecord, src: Source, center: [f64; 2], tag: Option<&str>) -> Result<[Map; 2]> {
        let key = tag.map(|t| format!("{}|{}|{t}", Self::scene_key(rec), src.tag()));
        if let Some(k) = &key {
            if let (Some(a), Some(b)) = (self.cache.get(&format!("{k}|a")), self.cache.get(&format!("{k}|b"))) {
                return Ok([a.clone(), b.clone()]);
            }
        }
        let img = self.raster(rec, src)?;
        let (side_a, side_b) = patch_sides(rec.entry.height);
        let tag_id = tag.unwrap_or("sample");
        let a = self.run(&format!("{}/{tag_id}/a", rec.id()), src, &extract_patch(&img, center, side_a)?)?;
        let b = self.run(&format!("{}/{tag_id}/b", rec.id()), src, &extract_patch(&img, center, side_b)?)?;
        if let Some(k) = key {
            self.cache.insert(format!("{k}|a"), a.clone());
            self.cache.insert(format!("{k}|b"), b.clone());
        }
        Ok([a, b])
    }
}

/// Feature indices and targets of one ground-truth pose.
#[derive(Clone, Debug)]
struct Example {
    /// Global, patch A, patch B.
    image: [usize; 3],
    context: [usize; 3],
    class: usize,
    center: [f64; 2],
    scale: [f64; 2],
    deform: [f64; 2 * NUM_KEYPOINTS],
}

/// Cached maps and per-pose targets for a set of records.
pub struct TrainingSet {
    maps: Vec<Map>,
    examples: Vec<Example>,
    m: usize,
}

impl TrainingSet {
    /// Records must already carry derived targets.
    pub fn build(records: &[SceneRecord], cfg: &PipelineConfig, fx: &mut FeatureExtractor) -> Result<Self> {
        let ctx_src = Source::context(cfg);
        let mut maps = Vec::new();
        let mut push = |m: Map| {
            maps.push(m);
            maps.len() - 1
        };
        let mut examples = Vec::new();
        for rec in records {
            if rec.targets.len() != rec.poses.len() {
                return Err(Error::State(format!("scene {} has no derived targets", rec.id())));
            }
            let gi = push(fx.global(rec, Source::Image)?);
            let gc = push(fx.global(rec, ctx_src)?);
            let to_scene = |v: [f64; 2]| [v[0] * rec.entry.width as f64 / FRAME, v[1] * rec.entry.height as f64 / FRAME];
            for (j, t) in rec.targets.iter().enumerate() {
                let center = to_scene(t.params.center);
                let tag = format!("gt{j}");
                let [ia, ib] = fx.patches(rec, Source::Image, center, Some(&tag))?;
                let [ca, cb] = fx.patches(rec, ctx_src, center, Some(&tag))?;
                let (ia, ib, ca, cb) = (push(ia), push(ib), push(ca), push(cb));
                let mut deform = [0.0; 2 * NUM_KEYPOINTS];
                for (i, d) in t.params.deform.iter().enumerate() {
                    deform[2 * i] = d[0];
                    deform[2 * i + 1] = d[1];
                }
                examples.push(Example {
                    image: [gi, ia, ib],
                    context: [gc, ca, cb],
                    class: t.class,
                    center: t.params.center,
                    scale: t.params.scale,
                    deform,
                });
            }
        }
        Ok(TrainingSet { maps, examples, m: cfg.templates })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.class).collect()
    }

    pub fn view(&self, kind: HeadKind) -> HeadView<'_> {
        HeadView { set: self, kind }
    }

    fn stack(&self, pick: impl Fn(&Example) -> [usize; 3], indices: &[usize], maps: usize) -> Tensor<f32> {
        let mut data = Vec::with_capacity(maps * indices.len() * TOKENS * FEATURE_CHANNELS);
        for k in 0..maps {
            for &i in indices {
                data.extend_from_slice(self.maps[pick(&self.examples[i])[k]].data());
            }
        }
        Tensor::new([maps * indices.len() * TOKENS, FEATURE_CHANNELS], data).expect("sized stack")
    }

    pub fn input(&self, kind: HeadKind, indices: &[usize]) -> HeadInput<f32> {
        let maps = kind.scope().maps();
        let class = kind.needs_class().then(|| one_hot_batch(indices.iter().map(|&i| self.examples[i].class), self.m));
        HeadInput {
            batch: indices.len(),
            image: Some(self.stack(|e| e.image, indices, maps)),
            context: Some(self.stack(|e| e.context, indices, maps)),
            class,
        }
    }
}

fn one_hot_batch(classes: impl ExactSizeIterator<Item = usize>, m: usize) -> Tensor<f32> {
    let b = classes.len();
    let mut t = Tensor::zeros([b, m]);
    for (r, c) in classes.enumerate() {
        t.data_mut()[r * m + c] = 1.0;
    }
    t
}

/// One head's view of a [`TrainingSet`].
pub struct HeadView<'a> {
    set: &'a TrainingSet,
    kind: HeadKind,
}

impl HeadData<f32> for HeadView<'_> {
    fn len(&self) -> usize {
        self.set.len()
    }

    fn batch(&self, indices: &[usize]) -> Result<(HeadInput<f32>, Tensor<f32>)> {
        let input = self.set.input(self.kind, indices);
        let dim = self.kind.data_dim(self.set.m);
        let mut target = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            let e = &self.set.examples[i];
            let unit = |v: f64| (v / FRAME) as f32;
            match self.kind {
                HeadKind::Location => target.extend(e.center.map(unit)),
                HeadKind::Scale => target.extend(e.scale.map(unit)),
                HeadKind::Deform => target.extend(e.deform.map(unit)),
                HeadKind::Unified => {
                    target.extend(e.scale.map(unit));
                    target.extend(e.deform.map(unit));
                }
                HeadKind::Classifier => target.extend((0..self.set.m).map(|c| if c == e.class { 1.0 } else { 0.0 })),
            }
        }
        Ok((input, Tensor::new([indices.len(), dim], target)?))
    }
}

/// One sampled person. Center and keypoints are scene pixels; scale and
/// deformation stay in the 256-frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledPose {
    pub center: [f64; 2],
    pub class: usize,
    pub scale: [f64; 2],
    pub keypoints: Vec<[f64; 2]>,
}

impl SampledPose {
    pub fn pose(&self) -> Result<Pose> {
        Pose::from_flat(&self.keypoints.iter().flatten().copied().collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub scene: String,
    pub samples: Vec<SampledPose>,
}

/// Trained heads plus the template bank they were trained against.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub bank: TemplateBank,
    pub heads: Vec<HeadModel<f32>>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, bank: TemplateBank) -> Result<Self> {
        config.validate()?;
        if bank.len() != config.templates {
            return Err(Error::Config(format!(
                "template bank holds {} templates but the configuration expects {}",
                bank.len(),
                config.templates
            )));
        }
        Ok(Pipeline { config, bank, heads: Vec::new() })
    }

    pub fn head(&self, kind: HeadKind) -> Result<&HeadModel<f32>> {
        self.heads
            .iter()
            .find(|h| h.kind() == kind)
            .ok_or_else(|| Error::State(format!("no trained {kind} head; run `train --head {kind}` first")))
    }

    /// Train the given heads (all active heads when `None`) and keep them.
    pub fn train(&mut self, set: &TrainingSet, heads: Option<&[HeadKind]>) -> Result<Vec<EpochLog>> {
        let kinds = heads.map(<[HeadKind]>::to_vec).unwrap_or_else(|| self.config.active_heads());
        let mut logs = Vec::new();
        for kind in kinds {
            self.config.check_head(kind)?;
            let mut model = HeadModel::new(self.config.head_spec(kind), self.config.head_seed(kind))?;
            logs.extend(train_head(&mut model, &set.view(kind), self.config.train_options(kind))?);
            self.heads.retain(|h| h.kind() != kind);
            self.heads.push(model);
        }
        Ok(logs)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.config.save(&dir.join(CONFIG_FILE))?;
        self.bank.save(&dir.join(TEMPLATES_FILE))?;
        for h in &self.heads {
            h.save(&dir.join(format!("{}.ckpt", h.kind())))?;
        }
        Ok(())
    }

    /// Load config, bank and every available checkpoint from a run directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let config = PipelineConfig::load(&dir.join(CONFIG_FILE))?;
        let bank = TemplateBank::load(&dir.join(TEMPLATES_FILE))?;
        let mut p = Pipeline::new(config, bank)?;
        for kind in p.config.active_heads() {
            let path = dir.join(format!("{kind}.ckpt"));
            if path.exists() {
                p.heads.push(HeadModel::load(p.config.head_spec(kind), &path)?);
            }
        }
        Ok(p)
    }

    /// Every active head must be present before sampling.
    pub fn check_complete(&self) -> Result<()> {
        for kind in self.config.active_heads() {
            self.head(kind)?;
        }
        Ok(())
    }

    fn global_input(&self, fx: &mut FeatureExtractor, rec: &SceneRecord, n: usize) -> Result<HeadInput<f32>> {
        let gi = fx.global(rec, Source::Image)?;
        let gc = fx.global(rec, Source::context(&self.config))?;
        let rep = |m: &Map| {
            let mut d = Vec::with_capacity(n * m.numel());
            for _ in 0..n {
                d.extend_from_slice(m.data());
            }
            Tensor::new([n * TOKENS, FEATURE_CHANNELS], d).expect("sized")
        };
        Ok(HeadInput { batch: n, image: Some(rep(&gi)), context: Some(rep(&gc)), class: None })
    }

    /// `n` location draws in scene pixels.
    pub fn sample_locations(&self, fx: &mut FeatureExtractor, rec: &SceneRecord, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 2]>> {
        let head = self.head(HeadKind::Location)?;
        let input = self.global_input(fx, rec, n)?;
        let raw = head.sample_raw(&input, rng)?;
        let dims = rec.dims();
        Ok(raw
            .data()
            .chunks(2)
            .map(|o| {
                let o = clamp_location([o[0] as f64 * FRAME, o[1] as f64 * FRAME]);
                [o[0] * dims.width / FRAME, o[1] * dims.height / FRAME]
            })
            .collect())
    }

    /// Combined-scope inputs at the given scene-pixel centers.
    fn combined_input(&self, fx: &mut FeatureExtractor, rec: &SceneRecord, centers: &[[f64; 2]], tags: Option<&[String]>) -> Result<HeadInput<f32>> {
        let n = centers.len();
        let ctx_src = Source::context(&self.config);
        let mut image = vec![Vec::new(); 3];
        let mut context = vec![Vec::new(); 3];
        let gi = fx.global(rec, Source::Image)?;
        let gc = fx.global(rec, ctx_src)?;
        for (i, &c) in centers.iter().enumerate() {
            let tag = tags.map(|t| t[i].as_str());
            let [ia, ib] = fx.patches(rec, Source::Image, c, tag)?;
            let [ca, cb] = fx.patches(rec, ctx_src, c, tag)?;
            for (slot, m) in [(0, &gi), (1, &ia), (2, &ib)] {
                image[slot].extend_from_slice(m.data());
            }
            for (slot, m) in [(0, &gc), (1, &ca), (2, &cb)] {
                context[slot].extend_from_slice(m.data());
            }
        }
        let cat = |parts: Vec<Vec<f32>>| Tensor::new([3 * n * TOKENS, FEATURE_CHANNELS], parts.concat()).expect("sized");
        Ok(HeadInput { batch: n, image: Some(cat(image)), context: Some(cat(context)), class: None })
    }

    fn classes(&self, input: &HeadInput<f32>) -> Result<Vec<usize>> {
        if self.config.fixed_template {
            return Ok(vec![0; input.batch]);
        }
        let probs = self.head(HeadKind::Classifier)?.predict_proba(input)?;
        let m = self.config.templates;
        Ok(probs.data().chunks(m).map(|p| argmax(&p.iter().map(|&v| v as f64).collect::<Vec<_>>())).collect())
    }

    /// Template-class accuracy with patches at the ground-truth centers.
    pub fn classifier_accuracy(&self, fx: &mut FeatureExtractor, records: &[SceneRecord]) -> Result<f64> {
        let (mut hits, mut total) = (0usize, 0usize);
        for rec in records {
            if rec.targets.is_empty() {
                continue;
            }
            let dims = rec.dims();
            let centers: Vec<[f64; 2]> =
                rec.targets.iter().map(|t| [t.params.center[0] * dims.width / FRAME, t.params.center[1] * dims.height / FRAME]).collect();
            let tags: Vec<String> = (0..centers.len()).map(|j| format!("gt{j}")).collect();
            let input = self.combined_input(fx, rec, &centers, Some(&tags))?;
            let pred = self.classes(&input)?;
            hits += pred.iter().zip(&rec.targets).filter(|(p, t)| **p == t.class).count();
            total += rec.targets.len();
        }
        if total == 0 {
            return Err(Error::Input("no labelled poses to score".into()));
        }
        Ok(hits as f64 / total as f64)
    }

    /// Full four-stage sampling of `n` people for one scene.
    pub fn sample_scene(&self, fx: &mut FeatureExtractor, rec: &SceneRecord, n: usize, rng: &mut ChaCha8Rng) -> Result<SampleSet> {
        self.check_complete()?;
        if n == 0 {
            return Ok(SampleSet { scene: rec.id().to_string(), samples: Vec::new() });
        }
        let dims = rec.dims();
        let centers = self.sample_locations(fx, rec, n, rng)?;
        let mut input = self.combined_input(fx, rec, &centers, None)?;
        let classes = self.classes(&input)?;
        let mut onehot = Tensor::zeros([n, self.config.templates]);
        for (r, &c) in classes.iter().enumerate() {
            onehot.data_mut()[r * self.config.templates + c] = 1.0;
        }
        input.class = Some(onehot);
        let to_frame = |v: f32| v as f64 * FRAME;
        let (scales, deforms): (Vec<[f64; 2]>, Vec<Vec<f64>>) = if self.config.unified {
            let raw = self.head(HeadKind::Unified)?.sample_raw(&input, rng)?;
            raw.data()
                .chunks(2 * NUM_KEYPOINTS + 2)
                .map(|r| (clamp_scale([to_frame(r[0]), to_frame(r[1])]), r[2..].iter().map(|&v| clamp_deform(to_frame(v))).collect()))
                .unzip()
        } else {
            let s = self.head(HeadKind::Scale)?.sample_raw(&input, rng)?;
            let d = self.head(HeadKind::Deform)?.sample_raw(&input, rng)?;
            (
                s.data().chunks(2).map(|r| clamp_scale([to_frame(r[0]), to_frame(r[1])])).collect(),
                d.data().chunks(2 * NUM_KEYPOINTS).map(|r| r.iter().map(|&v| clamp_deform(to_frame(v))).collect()).collect(),
            )
        };
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let mut deform = [[0.0; 2]; NUM_KEYPOINTS];
            for (k, d) in deform.iter_mut().enumerate() {
                *d = [deforms[i][2 * k], deforms[i][2 * k + 1]];
            }
            let params = TransformParams {
                center: [centers[i][0] * FRAME / dims.width, centers[i][1] * FRAME / dims.height],
                scale: scales[i],
                deform,
                scene: dims,
            };
            let pose = apply_transform(&self.bank.templates[classes[i]], &params)?;
            samples.push(SampledPose { center: centers[i], class: classes[i], scale: scales[i], keypoints: pose.keypoints.to_vec() });
        }
        Ok(SampleSet { scene: rec.id().to_string(), samples })
    }

    /// Sample `draws` people per ground-truth pose and score each against the
    /// ground-truth pose with the nearest center, in the 256-frame.
    pub fn evaluate(&self, fx: &mut FeatureExtractor, records: &[SceneRecord], draws: usize, seed: u64) -> Result<EvalReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for rec in records {
            let set = self.sample_scene(fx, rec, draws * rec.poses.len(), &mut rng)?;
            rows.extend(score_samples(&set, rec, self.config.alpha, self.config.beta)?);
        }
        Ok(EvalReport::from_rows(rows, self.config.alpha, self.config.beta))
    }
}

/// Metric rows pairing each sample with its nearest-center ground truth.
pub fn score_samples(set: &SampleSet, rec: &SceneRecord, alpha: f64, beta: f64) -> Result<Vec<MetricRow>> {
    let dims = rec.dims();
    let gts: Vec<Pose> = rec.poses.iter().map(|p| dims.to_frame(p)).collect();
    if gts.is_empty() {
        return Ok(Vec::new());
    }
    let centers: Vec<[f64; 2]> = gts.iter().map(|p| {
        let b = p.bbox();
        [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0]
    }).collect();
    set.samples
        .iter()
        .map(|s| {
            let pred = dims.to_frame(&s.pose()?);
            let b = pred.bbox();
            let c = [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0];
            let nearest = (0..gts.len())
                .min_by(|&a, &b| dist2(c, centers[a]).total_cmp(&dist2(c, centers[b])).then(a.cmp(&b)))
                .expect("non-empty");
            MetricRow::compute(&pred, &gts[nearest], alpha, beta)
        })
        .collect()
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Derive targets on every record against `bank`.
pub fn prepare(records: &mut [SceneRecord], bank: &TemplateBank, cfg: &PipelineConfig) -> Result<()> {
    for r in records.iter_mut() {
        r.derive_targets(bank, cfg.fixed_template)?;
    }
    Ok(())
}

/// One ablation grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub label: String,
    pub config: PipelineConfig,
}

/// Every attention mode × {semantic, depth}, then label modes 2/3/4/150,
/// the fixed template, and the unified head, all relative to `base`.
pub fn ablation_grid(base: &PipelineConfig) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for modality in [ContextModality::Semantic, ContextModality::Depth] {
        for mode in AttentionMode::ALL {
            let mut c = base.clone();
            c.attention.mode = mode;
            c.modality = modality;
            c.labels = LabelMode::Eight;
            cells.push(AblationCell { label: format!("{mode}/{modality}"), config: c });
        }
    }
    let mut mutual = base.clone();
    mutual.attention.mode = AttentionMode::Mutual;
    mutual.modality = ContextModality::Semantic;
    mutual.labels = LabelMode::Eight;
    for (name, labels) in [("A", LabelMode::Two), ("B", LabelMode::Three), ("C", LabelMode::Four), ("D", LabelMode::Full)] {
        cells.push(AblationCell { label: format!("{name}:labels-{labels}"), config: PipelineConfig { labels, ..mutual.clone() } });
    }
    cells.push(AblationCell { label: "E:fixed-template".into(), config: PipelineConfig { fixed_template: true, ..mutual.clone() } });
    cells.push(AblationCell { label: "F:unified".into(), config: PipelineConfig { unified: true, ..mutual } });
    cells
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub label: String,
    pub report: EvalReport,
    pub logs: Vec<EpochLog>,
}

/// Train and evaluate every cell. Template banks are shared; targets are
/// re-derived per cell because the fixed-template cell changes them.
pub fn run_ablation(
    cells: &[AblationCell],
    train: &[SceneRecord],
    eval: &[SceneRecord],
    bank: &TemplateBank,
    fx: &mut FeatureExtractor,
    draws: usize,
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut tr = train.to_vec();
        let mut ev = eval.to_vec();
        prepare(&mut tr, bank, &cell.config)?;
        prepare(&mut ev, bank, &cell.config)?;
        let set = TrainingSet::build(&tr, &cell.config, fx)?;
        let mut p = Pipeline::new(cell.config.clone(), bank.clone())?;
        let logs = p.train(&set, None)?;
        let report = p.evaluate(fx, &ev, draws, cell.config.seed)?;
        out.push(AblationResult { label: cell.label.clone(), report, logs });
    }
    Ok(out)
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut s = EvalReport::csv_header();
    s.push('\n');
    for r in results {
        s.push_str(&r.report.csv_row(&r.label));
        s.push('\n');
    }
    s
}

pub fn ablation_text(results: &[AblationResult]) -> String {
    let rows: Vec<(String, &EvalReport)> = results.iter().map(|r| (r.label.clone(), &r.report)).collect();
    crate::metrics::text_table(&rows)
}

pub fn write_logs(dir: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut by_head: Vec<HeadKind> = logs.iter().map(|l| l.head).collect();
    by_head.dedup();
    for kind in by_head {
        let rows: Vec<EpochLog> = logs.iter().filter(|l| l.head == kind).cloned().collect();
        let path = dir.join(format!("{kind}_log.csv"));
        std::fs::write(&path, log_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn scene_dims_of(img: &Raster) -> SceneDims {
    SceneDims::new(img.width() as f64, img.height() as f64)
}
