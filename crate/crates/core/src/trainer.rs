//! Training loop, optimiser, checkpoints and model selection.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::datamodel::{AnnotationSet, PredictionSet, Sample, SamplePredictions, Taxonomy};
use crate::dataset::{Mode, PreprocessConfig, RawSample};
use crate::error::{Error, Result};
use crate::head::LossValues;
use crate::metrics::{evaluate_sets, EvalReport, EvalSettings};
use crate::model::StillFast;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"SFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Accepted for preset fidelity; computation is always f64.
    pub mixed_precision: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            weight_decay: 0.0001,
            momentum: 0.9,
            lr_drop_epochs: vec![15, 30],
            lr_drop_factor: 10.0,
            batch_size: 2,
            max_epochs: 40,
            seed: 0,
            mixed_precision: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be positive");
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_drop_epochs must be strictly increasing");
        }
        if !(self.lr_drop_factor > 0.0) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr_drop_factor must be positive, weight_decay non-negative and momentum in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let drops = cfg.lr_drop_epochs.iter().filter(|&&e| epoch >= e).count();
    cfg.base_lr / cfg.lr_drop_factor.powi(drops as i32)
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let v = self.velocity[k].data_mut();
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grads[k].data()) {
                let d = gi + self.weight_decay * *pi;
                *vi = self.momentum * *vi + d;
                *pi -= lr * *vi;
            }
        }
    }
}

/// Losses and parameter gradients averaged over a batch.
pub fn batch_gradients(
    model: &StillFast,
    store: &ParamStore,
    batch: &[&Sample],
    rng: &mut ChaCha8Rng,
) -> Result<(LossValues, Vec<Tensor>)> {
    let mut grads: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
    let mut losses = LossValues::default();
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let mut g = Graph::new();
        let l = model.training_losses(&mut g, store, s, rng)?;
        let v = l.values(&g);
        if !v.total.is_finite() {
            return Err(Error::Diverged {
                uid: s.uid.clone(),
                loss: v.total,
            });
        }
        losses.accumulate(&v);
        let gr = g.backward(l.total);
        for (id, t) in g.param_grads(&gr) {
            let acc = grads[id.index()].data_mut();
            for (a, b) in acc.iter_mut().zip(t.data()) {
                *a += scale * b;
            }
        }
    }
    losses.scale(scale);
    Ok((losses, grads))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossValues,
}

/// Metadata written next to every parameter snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub version: u32,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub snapshot: String,
    pub sha256: String,
    pub config_hash: String,
    pub seed: u64,
    pub val_report: EvalReport,
    pub best: bool,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend((name.len() as u32).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend((d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend(v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn tensor(&mut self) -> Option<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).ok()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Option<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = self.take(numel.checked_mul(8)?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Some((name, Tensor::from_vec(&shape, data)))
    }
}

/// Parameters and optimiser state in the binary snapshot format.
pub fn encode_snapshot(store: &ParamStore, sgd: &Sgd, epoch: usize, step: usize) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend(CHECKPOINT_MAGIC);
    buf.extend(CHECKPOINT_VERSION.to_le_bytes());
    buf.extend((epoch as u64).to_le_bytes());
    buf.extend((step as u64).to_le_bytes());
    buf.extend((store.len() as u64).to_le_bytes());
    for (k, (_, name, t)) in store.iter().enumerate() {
        put_tensor(&mut buf, name, t);
        put_tensor(&mut buf, name, &sgd.velocity[k]);
    }
    buf
}

/// Restores parameters and velocity into a store built for the same model.
/// Returns `(epoch, step)`.
pub fn decode_snapshot(bytes: &[u8], path: &Path, store: &mut ParamStore, sgd: &mut Sgd) -> Result<(usize, usize)> {
    let fail = |m: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message: m,
    };
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(6) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(fail("not a checkpoint file".into()));
    }
    let version = c.u32().ok_or_else(|| fail("truncated header".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("schema version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let (epoch, step, n) = match (c.u64(), c.u64(), c.u64()) {
        (Some(e), Some(s), Some(n)) => (e as usize, s as usize, n as usize),
        _ => return Err(fail("truncated header".into())),
    };
    if n != store.len() {
        return Err(fail(format!("{n} parameters stored, model has {}", store.len())));
    }
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let (name, value) = c.tensor().ok_or_else(|| fail("corrupt parameter record".into()))?;
        let (_, velocity) = c.tensor().ok_or_else(|| fail("corrupt optimiser record".into()))?;
        if name != store.name(id) || value.shape() != store.get(id).shape() || velocity.shape() != value.shape() {
            return Err(fail(format!("parameter `{name}` does not match the model's `{}`", store.name(id))));
        }
        *store.get_mut(id) = value;
        sgd.velocity[k] = velocity;
    }
    if c.pos != bytes.len() {
        return Err(fail("trailing bytes".into()));
    }
    Ok((epoch, step))
}

/// Writes `<stem>.sfckpt` and `<stem>.json` in `dir`.
pub fn save_checkpoint(dir: &Path, stem: &str, bytes: &[u8], record: &CheckpointRecord) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin = dir.join(format!("{stem}.sfckpt"));
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    write_record(&dir.join(format!("{stem}.json")), record)?;
    Ok(bin)
}

pub fn write_record(path: &Path, record: &CheckpointRecord) -> Result<()> {
    let text = serde_json::to_string_pretty(record).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_record(path: &Path) -> Result<CheckpointRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a snapshot after checking its sidecar and digest.
pub fn load_checkpoint(bin: &Path, store: &mut ParamStore, sgd: &mut Sgd) -> Result<CheckpointRecord> {
    let record = read_record(&bin.with_extension("json"))?;
    let mut bytes = Vec::new();
    File::open(bin)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(bin, e))?;
    if sha256_hex(&bytes) != record.sha256 {
        return Err(Error::Checkpoint {
            path: bin.to_path_buf(),
            message: "digest does not match its sidecar".into(),
        });
    }
    decode_snapshot(&bytes, bin, store, sgd)?;
    Ok(record)
}

/// Deterministic per-sample seed for oracle jitter at evaluation time.
pub fn uid_seed(uid: &str) -> u64 {
    uid.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Predictions for already-preprocessed samples.
pub fn predict_samples(model: &StillFast, store: &ParamStore, samples: &[Sample]) -> Result<PredictionSet> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        out.push(SamplePredictions {
            uid: s.uid.clone(),
            predictions: model.predict(store, s, uid_seed(&s.uid))?,
        });
    }
    Ok(PredictionSet { samples: out })
}

/// Annotation set in preprocessed coordinates.
pub fn annotation_set(taxonomy: &Taxonomy, raw: &[RawSample], samples: &[Sample]) -> AnnotationSet {
    AnnotationSet {
        taxonomy: taxonomy.clone(),
        samples: raw
            .iter()
            .zip(samples)
            .map(|(r, s)| crate::datamodel::SampleRecord {
                annotations: s.annotations.clone(),
                ..r.record.clone()
            })
            .collect(),
    }
}

/// Everything a training run needs besides the model.
pub struct TrainData<'a> {
    pub taxonomy: &'a Taxonomy,
    pub train: &'a [RawSample],
    pub val: &'a [RawSample],
    pub preprocess: &'a PreprocessConfig,
    pub frame_rate: f64,
    pub eval: EvalSettings,
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: CheckpointRecord,
    pub best_predictions: PredictionSet,
    pub records: Vec<CheckpointRecord>,
    pub log: Vec<LogLine>,
}

/// Where and how a run persists itself.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub dir: Option<PathBuf>,
    pub config_hash: String,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
    r.set_stream(stream);
    r
}

/// Order in which training samples are visited in `epoch`. Depends only on
/// the seed, so every variant trained with it sees the same order.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, epoch, 1));
    order
}

fn preprocess_all(raw: &[RawSample], cfg: &PreprocessConfig, mode: Mode, frame_rate: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    raw.iter().map(|r| r.preprocess(cfg, mode, frame_rate, rng)).collect()
}

/// Runs the full schedule and returns the checkpoint with the best
/// overall mAP (earliest epoch on ties).
pub fn train(
    model: &StillFast,
    store: &mut ParamStore,
    data: &TrainData,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.preprocess.validate()?;
    if data.train.is_empty() && cfg.max_epochs > 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    if cfg.mixed_precision {
        log::warn!("mixed precision requested; training runs in f64");
    }
    let mut sgd = Sgd::new(store, cfg.momentum, cfg.weight_decay);
    let mut start_epoch = 0;
    let mut step = 0;
    if let Some(path) = &opts.resume {
        let rec = load_checkpoint(path, store, &mut sgd)?;
        if rec.config_hash != opts.config_hash {
            log::warn!("resuming {} under a changed configuration; the new schedule applies", path.display());
        }
        start_epoch = rec.epoch;
        step = rec.step;
    }
    let mut fixed = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val = preprocess_all(data.val, data.preprocess, Mode::Eval, data.frame_rate, &mut fixed)?;
    let val_set = annotation_set(data.taxonomy, data.val, &val);
    let cached_train = if data.preprocess.train_short_sides.len() == 1 {
        Some(preprocess_all(data.train, data.preprocess, Mode::Train, data.frame_rate, &mut fixed)?)
    } else {
        None
    };

    let ckpt_dir = opts.dir.as_ref().map(|d| d.join("checkpoints"));
    let mut log_file = match &opts.dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join("train_log.jsonl");
            Some((
                OpenOptions::new().create(true).append(true).open(&p).map_err(|e| Error::io(&p, e))?,
                p,
            ))
        }
        None => None,
    };

    let mut records: Vec<CheckpointRecord> = Vec::new();
    let mut best: Option<(CheckpointRecord, PredictionSet)> = None;
    let mut log_lines = Vec::new();

    let mut finish_epoch = |epoch: usize, step: usize, store: &ParamStore, sgd: &Sgd| -> Result<()> {
        let preds = predict_samples(model, store, &val)?;
        let report = evaluate_sets(&preds, &val_set, &data.eval)?;
        log::info!("epoch {epoch}: overall {:.2} noun {:.2}", report.map_overall, report.map_noun);
        let bytes = encode_snapshot(store, sgd, epoch, step);
        let stem = format!("epoch_{epoch:03}");
        let mut record = CheckpointRecord {
            version: CHECKPOINT_VERSION,
            epoch,
            step,
            snapshot: format!("{stem}.sfckpt"),
            sha256: sha256_hex(&bytes),
            config_hash: opts.config_hash.clone(),
            seed: cfg.seed,
            val_report: report,
            best: false,
        };
        let better = best
            .as_ref()
            .is_none_or(|(b, _)| record.val_report.map_overall > b.val_report.map_overall);
        if let Some(dir) = &ckpt_dir {
            save_checkpoint(dir, &stem, &bytes, &record)?;
        }
        if better {
            record.best = true;
            best = Some((record.clone(), preds));
        }
        records.push(record);
        Ok(())
    };

    if start_epoch >= cfg.max_epochs {
        finish_epoch(start_epoch, step, store, &sgd)?;
    }
    for epoch in start_epoch..cfg.max_epochs {
        let lr = lr_at(epoch, cfg);
        let mut rng = epoch_rng(cfg.seed, epoch, 2);
        let order = epoch_order(cfg.seed, epoch, data.train.len());
        for chunk in order.chunks(cfg.batch_size) {
            let owned: Vec<Sample>;
            let batch: Vec<&Sample> = match &cached_train {
                Some(c) => chunk.iter().map(|&i| &c[i]).collect(),
                None => {
                    owned = chunk
                        .iter()
                        .map(|&i| data.train[i].preprocess(data.preprocess, Mode::Train, data.frame_rate, &mut rng))
                        .collect::<Result<_>>()?;
                    owned.iter().collect()
                }
            };
            let (losses, grads) = batch_gradients(model, store, &batch, &mut rng)?;
            sgd.step(store, &grads, lr);
            step += 1;
            let line = LogLine {
                epoch,
                step,
                lr,
                losses,
            };
            if let Some((f, p)) = log_file.as_mut() {
                let text = serde_json::to_string(&line).expect("log line serialises");
                writeln!(f, "{text}").map_err(|e| Error::io(p.as_path(), e))?;
            }
            log_lines.push(line);
        }
        finish_epoch(epoch + 1, step, store, &sgd)?;
    }

    let (best, best_predictions) = best.expect("at least one checkpoint is evaluated");
    for r in records.iter_mut() {
        r.best = r.epoch == best.epoch;
        if let Some(dir) = &ckpt_dir {
            write_record(&dir.join(format!("epoch_{:03}.json", r.epoch)), r)?;
        }
    }
    Ok(TrainOutcome {
        best,
        best_predictions,
        records,
        log: log_lines,
    })
}
