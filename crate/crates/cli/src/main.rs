use std::path::{Path, PathBuf};
use std::process::ExitCode;

use affordance::dataset::{load_dataset, normalized_poses, synth_generate, LabelMode, SceneRecord};
use affordance::heads::HeadKind;
use affordance::mcma::AttentionMode;
use affordance::pipeline::{
    ablation_csv, ablation_grid, ablation_text, prepare, run_ablation, score_samples, write_logs, ContextModality,
    FeatureExtractor, Pipeline, PipelineConfig, SampleSet, TrainingSet, TEMPLATES_FILE,
};
use affordance::metrics::{text_table, EvalReport};
use affordance::render::overlay;
use affordance::templates::{kmedoids, TemplateBank};
use affordance::{Error, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "afford", about = "Scene-conditioned human pose affordance sampling")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of scenes.
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
    /// Cluster the dataset's poses into a template bank.
    MakeTemplates {
        #[arg(long)]
        dataset: PathBuf,
        /// Bank file, or a run directory that receives templates.json.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: ConfigArgs,
    },
    /// Train one head or all active heads into a run directory.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// location | classifier | scale | deform | unified | all
        #[arg(long, default_value = "all")]
        head: String,
        #[command(flatten)]
        opts: ConfigArgs,
    },
    /// Sample people for one scene with a trained run.
    Sample {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        scene: String,
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional PNG overlay of the sampled skeletons.
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Score a trained run (or a predictions file) against a dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        run: Option<PathBuf>,
        /// Sample-set JSON (one object or a list) to score instead of sampling.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Samples drawn per ground-truth pose.
        #[arg(long, default_value_t = 2)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        /// CSV report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw skeletons over a scene: ground truth, or a predictions file.
    Render {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        scene: String,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the attention-mode and architecture-variant grid.
    Ablate {
        /// Existing dataset; otherwise `--count` scenes are synthesized into OUT/dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        count: usize,
        /// Samples drawn per ground-truth pose at evaluation.
        #[arg(long, default_value_t = 2)]
        draws: usize,
        #[command(flatten)]
        opts: ConfigArgs,
    },
}

/// Overrides applied on top of `--config` (or the defaults).
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<AttentionMode>,
    #[arg(long)]
    modality: Option<ContextModality>,
    #[arg(long)]
    labels: Option<LabelMode>,
    /// Template count m.
    #[arg(long)]
    templates: Option<usize>,
    #[arg(long)]
    pool: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    fixed_template: bool,
    #[arg(long)]
    unified: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.mode {
            c.attention.mode = v;
        }
        if let Some(v) = self.modality {
            c.modality = v;
        }
        if let Some(v) = self.labels {
            c.labels = v;
        }
        if let Some(v) = self.templates {
            c.templates = v;
        }
        if let Some(v) = self.pool {
            c.attention.pool = v;
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch {
            c.batch = v;
        }
        c.fixed_template |= self.fixed_template;
        c.unified |= self.unified;
        c.validate()?;
        Ok(c)
    }
}

fn bank_path(out: &Path) -> PathBuf {
    if out.extension().is_some_and(|e| e == "json") {
        out.to_path_buf()
    } else {
        out.join(TEMPLATES_FILE)
    }
}

fn build_bank(records: &[SceneRecord], m: usize) -> Result<TemplateBank> {
    kmedoids(&normalized_poses(records)?, m)
}

fn find_scene<'a>(records: &'a [SceneRecord], id: &str) -> Result<&'a SceneRecord> {
    records.iter().find(|r| r.id() == id).ok_or_else(|| Error::NotFound(format!("scene '{id}' is not in the dataset")))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, format!("{text}\n")).map_err(|e| Error::io(p, e)),
        None => {
            use std::io::Write;
            match writeln!(std::io::stdout(), "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io(Path::new("<stdout>"), e)),
                _ => Ok(()),
            }
        }
    }
}

fn read_predictions(path: &Path) -> Result<Vec<SampleSet>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let sets = if v.is_array() { serde_json::from_value(v)? } else { vec![serde_json::from_value(v)?] };
    Ok(sets)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { out, seed, count } => {
            let entries = synth_generate(&out, seed, count)?;
            eprintln!("wrote {} scenes to {}", entries.len(), out.display());
        }
        Cmd::MakeTemplates { dataset, out, opts } => {
            let cfg = opts.resolve()?;
            let records = load_dataset(&dataset)?;
            let bank = build_bank(&records, cfg.templates)?;
            let path = bank_path(&out);
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            bank.save(&path)?;
            eprintln!("wrote {} templates to {}", bank.len(), path.display());
        }
        Cmd::Train { dataset, out, head, opts } => {
            let cfg = opts.resolve()?;
            let heads: Option<Vec<HeadKind>> = match head.as_str() {
                "all" => None,
                h => {
                    let k: HeadKind = h.parse()?;
                    cfg.check_head(k)?;
                    Some(vec![k])
                }
            };
            let mut records = load_dataset(&dataset)?;
            let bpath = out.join(TEMPLATES_FILE);
            let bank = if bpath.exists() { TemplateBank::load(&bpath)? } else { build_bank(&records, cfg.templates)? };
            // Keep heads trained earlier into the same run when adding one head.
            let mut pipe = match Pipeline::load(&out) {
                Ok(p) if heads.is_some() && p.config == cfg => p,
                _ => Pipeline::new(cfg.clone(), bank)?,
            };
            prepare(&mut records, &pipe.bank, &cfg)?;
            let mut fx = FeatureExtractor::new(&cfg.backbone, cfg.mapping()?)?;
            let set = TrainingSet::build(&records, &cfg, &mut fx)?;
            let logs = pipe.train(&set, heads.as_deref())?;
            pipe.save(&out)?;
            write_logs(&out, &logs)?;
            for l in logs.iter().filter(|l| l.epoch == cfg.epochs) {
                eprintln!("{}: final loss {:.6}", l.head, l.total);
            }
        }
        Cmd::Sample { run, dataset, scene, count, seed, out, render } => {
            let pipe = Pipeline::load(&run)?;
            pipe.check_complete()?;
            let records = load_dataset(&dataset)?;
            let rec = find_scene(&records, &scene)?;
            let mut fx = FeatureExtractor::new(&pipe.config.backbone, pipe.config.mapping()?)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = pipe.sample_scene(&mut fx, rec, count, &mut rng)?;
            emit(out.as_deref(), &serde_json::to_string_pretty(&set)?)?;
            if let Some(png) = render {
                let poses = set.samples.iter().map(|s| s.pose()).collect::<Result<Vec<_>>>()?;
                overlay(&rec.scene()?, &poses).save(&png)?;
            }
        }
        Cmd::Eval { dataset, run, predictions, count, seed, alpha, beta, out } => {
            let mut records = load_dataset(&dataset)?;
            let report = match (predictions, run) {
                (Some(pred), _) => {
                    let (a, b) = (alpha.unwrap_or(affordance::metrics::DEFAULT_ALPHA), beta.unwrap_or(affordance::metrics::DEFAULT_BETA));
                    let mut rows = Vec::new();
                    for set in read_predictions(&pred)? {
                        rows.extend(score_samples(&set, find_scene(&records, &set.scene)?, a, b)?);
                    }
                    EvalReport::from_rows(rows, a, b)
                }
                (None, Some(run)) => {
                    let mut pipe = Pipeline::load(&run)?;
                    if let Some(a) = alpha {
                        pipe.config.alpha = a;
                    }
                    if let Some(b) = beta {
                        pipe.config.beta = b;
                    }
                    pipe.config.validate()?;
                    pipe.check_complete()?;
                    prepare(&mut records, &pipe.bank, &pipe.config)?;
                    let mut fx = FeatureExtractor::new(&pipe.config.backbone, pipe.config.mapping()?)?;
                    pipe.evaluate(&mut fx, &records, count, seed)?
                }
                (None, None) => return Err(Error::Config("eval needs --run or --predictions".into())),
            };
            emit(None, text_table(&[("eval".to_string(), &report)]).trim_end())?;
            if let Some(p) = out {
                std::fs::write(&p, report.to_csv("eval")).map_err(|e| Error::io(&p, e))?;
            }
        }
        Cmd::Render { dataset, scene, predictions, out } => {
            let records = load_dataset(&dataset)?;
            let rec = find_scene(&records, &scene)?;
            let poses = match predictions {
                Some(p) => {
                    let sets = read_predictions(&p)?;
                    let set = sets.iter().find(|s| s.scene == scene).ok_or_else(|| Error::NotFound(format!("no predictions for scene '{scene}'")))?;
                    set.samples.iter().map(|s| s.pose()).collect::<Result<Vec<_>>>()?
                }
                None => rec.poses.clone(),
            };
            overlay(&rec.scene()?, &poses).save(&out)?;
        }
        Cmd::Ablate { dataset, out, count, draws, opts } => {
            let cfg = opts.resolve()?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let dataset = match dataset {
                Some(d) => d,
                None => {
                    let d = out.join("dataset");
                    synth_generate(&d, cfg.seed, count)?;
                    d
                }
            };
            let records = load_dataset(&dataset)?;
            if records.len() < 2 {
                return Err(Error::Input("ablation needs at least two scenes".into()));
            }
            // last fifth held out for scoring
            let split = records.len() - (records.len() / 5).max(1);
            let (train, eval) = records.split_at(split);
            let bank = build_bank(train, cfg.templates)?;
            let mut fx = FeatureExtractor::new(&cfg.backbone, cfg.mapping()?)?;
            let results = run_ablation(&ablation_grid(&cfg), train, eval, &bank, &mut fx, draws)?;
            let csv = out.join("ablation.csv");
            std::fs::write(&csv, ablation_csv(&results)).map_err(|e| Error::io(&csv, e))?;
            let table = ablation_text(&results);
            let txt = out.join("ablation.txt");
            std::fs::write(&txt, &table).map_err(|e| Error::io(&txt, e))?;
            emit(None, table.trim_end())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("E_USAGE: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
