//! The five subcommands as library functions.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stillfast_core::datamodel::{
    read_predictions, serialize_predictions, write_annotation_file, AnnotationSet, PredictionSet, SamplePredictions,
    Taxonomy,
};
use stillfast_core::dataset::{generate_synthetic, DatasetDir, Mode, SynthSceneSpec};
use stillfast_core::metrics::{evaluate_sets, EvalReport, EvalSettings};
use stillfast_core::model::StillFast;
use stillfast_core::nn::ParamStore;
use stillfast_core::trainer::{
    annotation_set, load_checkpoint, train, uid_seed, RunOptions, Sgd, TrainData, TrainOutcome,
};
use stillfast_core::{datamodel, Error};

use crate::config::{ablation_rows, ExperimentConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const VAL_PREDICTIONS: &str = "val_predictions.json";
pub const VAL_ANNOTATIONS: &str = "val_annotations.json";
pub const VAL_REPORT: &str = "val_report.json";
pub const BEST_RECORD: &str = "best.json";

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Data(_) | Error::Io { .. } => EXIT_DATA,
            Error::Diverged { .. } => EXIT_RUNTIME,
            _ => EXIT_USAGE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl CliError {
    fn usage(e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Model and freshly initialised parameters for `cfg` and `taxonomy`.
pub fn build_model(cfg: &ExperimentConfig, taxonomy: &Taxonomy) -> stillfast_core::Result<(StillFast, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut store = ParamStore::new();
    let model = StillFast::new(
        &mut store,
        &cfg.backbone,
        &cfg.head,
        cfg.preprocess.clip_len,
        taxonomy.num_nouns(),
        taxonomy.num_verbs(),
        &mut rng,
    )?;
    Ok((model, store))
}

fn write_text(path: &Path, text: &str) -> stillfast_core::Result<()> {
    fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> stillfast_core::Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serialisable") + "\n"))
}

/// A finished training run.
pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub taxonomy: Taxonomy,
    pub val_annotations: AnnotationSet,
}

fn open_datasets(cfg: &ExperimentConfig) -> stillfast_core::Result<(DatasetDir, DatasetDir)> {
    let train = DatasetDir::open(&cfg.data.train_dir)?;
    let val = DatasetDir::open(&cfg.data.val_dir)?;
    if train.annotations.taxonomy != val.annotations.taxonomy {
        return Err(Error::Taxonomy("training and validation sets declare different taxonomies".into()));
    }
    Ok((train, val))
}

/// Trains with a resolved configuration. With `run_dir`, persists the
/// resolved config, log, checkpoints, best-model predictions and report.
pub fn run_training(cfg: &ExperimentConfig, run_dir: Option<&Path>, resume: Option<&Path>) -> stillfast_core::Result<TrainRun> {
    cfg.validate()?;
    let (train_dir, val_dir) = open_datasets(cfg)?;
    let (l, s) = (cfg.preprocess.clip_len, cfg.preprocess.clip_stride);
    let train_raw = train_dir.load_raw(l, s)?;
    let val_raw = val_dir.load_raw(l, s)?;
    let taxonomy = train_dir.annotations.taxonomy.clone();
    let (model, mut store) = build_model(cfg, &taxonomy)?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
        write_text(&dir.join(RESOLVED_CONFIG), &cfg.to_toml())?;
    }
    let data = TrainData {
        taxonomy: &taxonomy,
        train: &train_raw,
        val: &val_raw,
        preprocess: &cfg.preprocess,
        frame_rate: cfg.data.frame_rate,
        eval: cfg.eval,
    };
    let opts = RunOptions {
        dir: run_dir.map(Path::to_path_buf),
        config_hash: cfg.hash(),
        resume: resume.map(Path::to_path_buf),
    };
    let outcome = train(&model, &mut store, &data, &cfg.train, &opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let val_samples = val_raw
        .iter()
        .map(|r| r.preprocess(&cfg.preprocess, Mode::Eval, cfg.data.frame_rate, &mut rng))
        .collect::<stillfast_core::Result<Vec<_>>>()?;
    let val_annotations = annotation_set(&taxonomy, &val_raw, &val_samples);
    if let Some(dir) = run_dir {
        serialize_predictions(&outcome.best_predictions, &dir.join(VAL_PREDICTIONS))?;
        write_annotation_file(&dir.join(VAL_ANNOTATIONS), &val_annotations)?;
        write_json(&dir.join(VAL_REPORT), &outcome.best.val_report)?;
        write_json(&dir.join(BEST_RECORD), &outcome.best)?;
    }
    Ok(TrainRun {
        outcome,
        taxonomy,
        val_annotations,
    })
}

/// `train`: resolves the config, checks the data and runs training.
pub fn cmd_train(
    config: Option<&Path>,
    preset: Option<&str>,
    overrides: &[String],
    run_dir: &Path,
    resume: Option<&Path>,
) -> CliResult<TrainRun> {
    let cfg = ExperimentConfig::resolve(preset, config, overrides)?;
    for d in [&cfg.data.train_dir, &cfg.data.val_dir] {
        if !d.join(stillfast_core::dataset::ANNOTATION_FILE).is_file() {
            return Err(Error::Data(format!("dataset not found at {}", d.display())).into());
        }
    }
    Ok(run_training(&cfg, Some(run_dir), resume)?)
}

/// `eval`: scores a prediction file; all failures are usage errors.
pub fn cmd_eval(pred: &Path, ann: &Path, settings: &EvalSettings, out: Option<&Path>) -> CliResult<EvalReport> {
    let inner = || -> stillfast_core::Result<EvalReport> {
        for c in settings.criteria() {
            c.validate()?;
        }
        let preds = read_predictions(pred)?;
        let anns = datamodel::read_annotation_file(ann)?;
        let report = evaluate_sets(&preds, &anns, settings)?;
        if let Some(out) = out {
            write_json(out, &report)?;
        }
        Ok(report)
    };
    inner().map_err(CliError::usage)
}

/// Resolved config stored with the run that produced `checkpoint`.
pub fn run_config_for(checkpoint: &Path) -> stillfast_core::Result<ExperimentConfig> {
    let run_dir = checkpoint
        .parent()
        .and_then(Path::parent)
        .ok_or_else(|| Error::Config(format!("cannot locate the run of {}", checkpoint.display())))?;
    load_resolved(&run_dir.join(RESOLVED_CONFIG))
}

pub fn load_resolved(path: &Path) -> stillfast_core::Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// `predict`: runs a checkpoint over a dataset; boxes are written in the
/// dataset's original frame coordinates.
pub fn cmd_predict(checkpoint: &Path, dataset: &Path, out: &Path, config: Option<&Path>) -> CliResult<PredictionSet> {
    let cfg = match config {
        Some(p) => load_resolved(p)?,
        None => run_config_for(checkpoint)?,
    };
    let ds = DatasetDir::open(dataset)?;
    let (model, mut store) = build_model(&cfg, &ds.annotations.taxonomy)?;
    let mut sgd = Sgd::new(&store, cfg.train.momentum, cfg.train.weight_decay);
    load_checkpoint(checkpoint, &mut store, &mut sgd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut samples = Vec::with_capacity(ds.len());
    for record in &ds.annotations.samples {
        let frames = ds.load_frames(record, cfg.preprocess.clip_len, cfg.preprocess.clip_stride)?;
        let raw = frames.last().map(|f| (f.width() as f64, f.height() as f64)).unwrap_or((1.0, 1.0));
        let raw_sample = stillfast_core::dataset::RawSample {
            record: record.clone(),
            frames,
        };
        let sample = raw_sample.preprocess(&cfg.preprocess, Mode::Eval, cfg.data.frame_rate, &mut rng)?;
        let (h, w) = sample.clip.still_size();
        let (sx, sy) = (raw.0 / w as f64, raw.1 / h as f64);
        let predictions = model
            .predict(&store, &sample, uid_seed(&sample.uid))?
            .into_iter()
            .filter_map(|mut p| {
                p.bbox = p.bbox.scaled(sx, sy).clipped(raw.0, raw.1)?;
                Some(p)
            })
            .collect();
        samples.push(SamplePredictions {
            uid: record.uid.clone(),
            predictions,
        });
    }
    let set = PredictionSet { samples };
    serialize_predictions(&set, out)?;
    Ok(set)
}

/// `synth`: writes a synthetic dataset described by a TOML spec.
pub fn cmd_synth(spec: &Path, n: usize, out: &Path) -> CliResult<AnnotationSet> {
    let text = fs::read_to_string(spec).map_err(|e| CliError::usage(format!("{}: {e}", spec.display())))?;
    let spec = SynthSceneSpec::from_toml(&text)?;
    Ok(generate_synthetic(&spec, n, out)?)
}

/// One row of an ablation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub key: String,
    pub label: String,
    pub best_epoch: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub table: u8,
    pub rows: Vec<AblationResult>,
}

impl AblationReport {
    pub fn markdown(&self) -> String {
        let mut s = format!(
            "| Table {} | Noun | N+V | N+TTC | Overall |\n|---|---:|---:|---:|---:|\n",
            self.table
        );
        for r in &self.rows {
            let v = r.report.values();
            s.push_str(&format!(
                "| {} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
                r.label, v[0], v[1], v[2], v[3]
            ));
        }
        s
    }
}

/// `ablate`: trains every row of a table from the same base config.
pub fn cmd_ablate(base: &ExperimentConfig, table: u8, out_dir: &Path) -> CliResult<AblationReport> {
    let rows = ablation_rows(table)?;
    base.validate()?;
    open_datasets(base)?;
    let mut results = Vec::with_capacity(rows.len());
    for row in rows {
        let cfg = row.apply(base);
        log::info!("ablation row `{}`", row.label);
        let run = run_training(&cfg, Some(&out_dir.join(row.key)), None)?;
        results.push(AblationResult {
            key: row.key.into(),
            label: row.label.into(),
            best_epoch: run.outcome.best.epoch,
            report: run.outcome.best.val_report,
        });
    }
    let report = AblationReport { table, rows: results };
    write_json(&out_dir.join(format!("ablation_table{table}.json")), &report)?;
    write_text(&out_dir.join(format!("ablation_table{table}.md")), &report.markdown())?;
    Ok(report)
}

/// Path of a checkpoint stem inside a run directory.
pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch:03}.sfckpt"))
}
