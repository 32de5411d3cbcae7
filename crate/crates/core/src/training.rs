//! Unsupervised end-to-end training, evaluation against oracle
//! denominators, and the checkpoint format.
//!
//! Checkpoint layout (all integers and floats little-endian):
//! magic `RPHG`, version `u32`, `n_t u32`, head `u8`, flags `u8`
//! (bit 0 residual, bit 1 two-stage), widths (`lift`, augment heads and
//! head width, first-stage layer count and pairs, two phase hidden widths,
//! second-stage layer count and pairs, head hidden; all `u32`), five input
//! scales `f64`, parameter count `u32`, then per parameter: name length
//! `u32`, UTF-8 name, rank `u32`, dims `u64`, values `f64`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::channel::{ChannelRealization, PowerBudget};
use crate::harness::{write_csv, DatasetError, DatasetFile};
use crate::hetgraph::InputScaling;
use crate::metrics::{loss_from_terms, see, MetricsError, ObjectiveConfig, TransmitDesign};
use crate::model::{HeadKind, HgnnModel, LayerWidth, ModelDims, ModelError, ModelFlags};
use crate::numerics::{AdamState, ModelParams, NumericsError, ParamBinder};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at sample {sample} in epoch {epoch}")]
    NonFinite { epoch: usize, sample: usize },
    #[error("{0}")]
    Usage(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, TrainError>;

/// Samples per independent gradient task; fixed so the summation order,
/// and thus the result, does not depend on the worker count.
const GRAD_CHUNK: usize = 16;
/// Samples per inference call during validation and evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub gamma: f64,
    pub head: HeadKind,
    pub flags: ModelFlags,
    pub dims: ModelDims,
    /// Trailing dataset samples held out for model selection.
    pub validation: usize,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    /// Optional per-epoch CSV log.
    pub log: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 30,
            lr: 1e-4,
            gamma: 0.1,
            head: HeadKind::ModelBased,
            flags: ModelFlags::default(),
            dims: ModelDims::desk(),
            validation: 512,
            dataset: PathBuf::from("train.bin"),
            checkpoint: PathBuf::from("model.ckpt"),
            log: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(TrainError::Config("gamma must be non-negative".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_see: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept (0 means the initial weights).
    pub best_epoch: usize,
    pub best_val_see: f64,
    pub steps: u64,
}

pub const EPOCH_COLUMNS: [&str; 4] = ["epoch", "mean_loss", "val_see", "wall_seconds"];

impl TrainReport {
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.epochs
            .iter()
            .map(|e| vec![e.epoch.to_string(), fmt_f64(e.mean_loss), fmt_f64(e.val_see), fmt_f64(e.wall_seconds)])
            .collect()
    }
}

/// Full-precision float formatting used by every CSV output.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

type ChunkGradient = (f64, BTreeMap<String, Vec<f64>>);

/// Loss and gradients of one chunk, weighted by `weight`. A non-finite
/// sample surfaces as `MetricsError::NonFinite` with its chunk index.
fn chunk_gradient(
    model: &HgnnModel,
    chs: &[&ChannelRealization],
    budget: &PowerBudget,
    obj: &ObjectiveConfig,
    weight: f64,
) -> Result<ChunkGradient> {
    let binder = ParamBinder::new(&model.params);
    let out = model.forward(&binder, chs, budget)?;
    let loss = loss_from_terms(&out.terms, obj)?;
    loss.scale(weight).backward()?;
    Ok((loss.item(), binder.leaf_grads()))
}

/// Mean hard SEE of the model's designs.
pub fn mean_see(model: &HgnnModel, chs: &[ChannelRealization], budget: &PowerBudget) -> Result<f64> {
    if chs.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<&ChannelRealization> = chs.iter().collect();
    let parts: Vec<Result<Vec<f64>>> = refs
        .par_chunks(EVAL_CHUNK)
        .map(|c| {
            let binder = ParamBinder::frozen(&model.params);
            let out = model.forward(&binder, c, budget)?;
            Ok(out.terms.hard_see(budget.p_c)?.values().to_vec())
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?.iter().sum::<f64>();
    }
    Ok(total / chs.len() as f64)
}

/// Trains `model` in place and leaves it holding the weights with the best
/// validation SEE. `on_epoch` sees every log row as soon as it exists.
pub fn fit(
    model: &mut HgnnModel,
    train: &[ChannelRealization],
    val: &[ChannelRealization],
    budget: &PowerBudget,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    for c in train.iter().chain(val) {
        let (n_t, l, k, m) = c.dims();
        model.check_channel_dims(n_t, l, k, m)?;
    }
    let obj = ObjectiveConfig {
        gamma: cfg.gamma,
        p_c: budget.p_c,
    };
    let mut adam = AdamState::new(cfg.lr);
    let mut best_params = model.params.clone();
    let mut best_val = if val.is_empty() { f64::NEG_INFINITY } else { mean_see(model, val, budget)? };
    let mut best_epoch = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len() as f64;
            let tasks: Vec<&[usize]> = batch.chunks(GRAD_CHUNK).collect();
            let results: Vec<_> = tasks
                .par_iter()
                .map(|idx| {
                    let chs: Vec<&ChannelRealization> = idx.iter().map(|&i| &train[i]).collect();
                    chunk_gradient(model, &chs, budget, &obj, idx.len() as f64 / b)
                })
                .collect();
            for (idx, r) in tasks.iter().zip(results) {
                match r {
                    Ok((loss, grads)) => {
                        loss_sum += loss * idx.len() as f64;
                        for (path, g) in grads {
                            if let Some(p) = model.params.get_mut(&path) {
                                p.grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                    Err(TrainError::Metrics(MetricsError::NonFinite { sample })) => {
                        return Err(TrainError::NonFinite {
                            epoch,
                            sample: idx[sample],
                        })
                    }
                    Err(e) => return Err(e),
                }
            }
            adam.step(&mut model.params)?;
        }
        let val_see = if val.is_empty() { f64::NAN } else { mean_see(model, val, budget)? };
        if !val.is_empty() && val_see > best_val {
            best_val = val_see;
            best_epoch = epoch;
            best_params = model.params.clone();
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            val_see,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: loss {:.6}, validation SEE {:.6}, {:.1}s",
            record.mean_loss, record.val_see, record.wall_seconds
        );
        on_epoch(&record);
        epochs.push(record);
    }
    if !val.is_empty() {
        model.params = best_params;
    } else {
        best_epoch = cfg.epochs;
    }
    model.params.zero_grad();
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_see: best_val,
        steps: adam.step_count,
    })
}

/// Reads the dataset, trains a fresh model, writes the checkpoint (best
/// validation weights) and the optional epoch log.
pub fn train(cfg: &TrainConfig) -> Result<(HgnnModel, TrainReport)> {
    cfg.validate()?;
    let data = DatasetFile::read(&cfg.dataset)?;
    if data.samples.len() <= cfg.validation {
        return Err(TrainError::Config(format!(
            "dataset has {} samples, need more than the {} held out for validation",
            data.samples.len(),
            cfg.validation
        )));
    }
    let split = data.samples.len() - cfg.validation;
    let (train_set, val_set) = data.samples.split_at(split);
    let scaling = InputScaling::from_scenario(&data.scenario);
    let mut model = HgnnModel::new(data.scenario.n_t, cfg.dims.clone(), cfg.head, cfg.flags, scaling, cfg.seed)?;
    let report = fit(&mut model, train_set, val_set, &data.scenario.budget(), cfg, |_| {})?;
    save_checkpoint(&model, &cfg.checkpoint)?;
    if let Some(log) = &cfg.log {
        write_csv(log, &EPOCH_COLUMNS, &report.csv_rows())?;
    }
    Ok((model, report))
}

/// Per-sample evaluation row.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub sample_id: usize,
    pub see: f64,
    pub oracle_see: f64,
    pub ratio: f64,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_see: f64,
    pub mean_ratio: f64,
    pub median_ratio: f64,
    /// Sorted achieved SEE values with their empirical CDF levels.
    pub cdf: Vec<(f64, f64)>,
    pub violations: usize,
    pub infer_seconds_per_sample: f64,
}

pub const EVAL_COLUMNS: [&str; 5] = ["sample_id", "see", "oracle_see", "ratio", "feasible"];

impl EvalReport {
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.sample_id.to_string(),
                    fmt_f64(r.see),
                    fmt_f64(r.oracle_see),
                    fmt_f64(r.ratio),
                    r.feasible.to_string(),
                ]
            })
            .collect()
    }
}

/// `see / oracle`; an oracle value of zero gives 1 when the design also
/// achieves zero and infinity otherwise.
pub fn see_ratio(see: f64, oracle: f64) -> f64 {
    if oracle > 0.0 {
        see / oracle
    } else if see <= 0.0 {
        1.0
    } else {
        f64::INFINITY
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Scores given designs against per-sample denominators.
pub fn evaluate_designs(
    chs: &[ChannelRealization],
    designs: &[TransmitDesign],
    denominators: &[f64],
    budget: &PowerBudget,
    infer_seconds: f64,
) -> Result<EvalReport> {
    if denominators.len() != chs.len() {
        return Err(TrainError::Usage(format!(
            "{} samples but {} oracle denominators",
            chs.len(),
            denominators.len()
        )));
    }
    if designs.len() != chs.len() {
        return Err(TrainError::Usage(format!("{} samples but {} designs", chs.len(), designs.len())));
    }
    let mut rows = Vec::with_capacity(chs.len());
    for (i, ((ch, d), &oracle)) in chs.iter().zip(designs).zip(denominators).enumerate() {
        let value = see(ch, d, budget.p_c)?.see;
        rows.push(EvalRow {
            sample_id: i,
            see: value,
            oracle_see: oracle,
            ratio: see_ratio(value, oracle),
            feasible: d.check_feasible(budget.p_max).is_ok(),
        });
    }
    let n = rows.len().max(1) as f64;
    let mut ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    ratios.sort_by(f64::total_cmp);
    let mut sees: Vec<f64> = rows.iter().map(|r| r.see).collect();
    sees.sort_by(f64::total_cmp);
    let cdf = sees.iter().enumerate().map(|(i, s)| (*s, (i + 1) as f64 / n)).collect();
    Ok(EvalReport {
        mean_see: rows.iter().map(|r| r.see).sum::<f64>() / n,
        mean_ratio: ratios.iter().sum::<f64>() / n,
        median_ratio: median(&ratios),
        cdf,
        violations: rows.iter().filter(|r| !r.feasible).count(),
        infer_seconds_per_sample: infer_seconds / n,
        rows,
    })
}

/// Model designs for every sample, computed in fixed-size chunks.
pub fn infer_all(model: &HgnnModel, chs: &[ChannelRealization], budget: &PowerBudget) -> Result<Vec<TransmitDesign>> {
    let refs: Vec<&ChannelRealization> = chs.iter().collect();
    let parts: Vec<Result<Vec<TransmitDesign>>> = refs
        .par_chunks(EVAL_CHUNK)
        .map(|c| Ok(model.infer(c, budget)?))
        .collect();
    let mut out = Vec::with_capacity(chs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Runs the model on every sample and scores it against the denominators.
pub fn evaluate(
    model: &HgnnModel,
    chs: &[ChannelRealization],
    denominators: &[f64],
    budget: &PowerBudget,
) -> Result<EvalReport> {
    if denominators.len() != chs.len() {
        return Err(TrainError::Usage(format!(
            "{} samples but {} oracle denominators",
            chs.len(),
            denominators.len()
        )));
    }
    let start = Instant::now();
    let designs = infer_all(model, chs, budget)?;
    let elapsed = start.elapsed().as_secs_f64();
    evaluate_designs(chs, &designs, denominators, budget, elapsed)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RPHG";
const CHECKPOINT_VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn encode_checkpoint(model: &HgnnModel) -> Vec<u8> {
    let mut b = Vec::new();
    let u32le = |b: &mut Vec<u8>, v: usize| b.extend_from_slice(&(v as u32).to_le_bytes());
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    u32le(&mut b, model.n_t);
    b.push(model.head.code());
    b.push(u8::from(model.flags.residual) | (u8::from(model.flags.two_stage) << 1));
    let d = &model.dims;
    u32le(&mut b, d.lift);
    u32le(&mut b, d.augment.heads);
    u32le(&mut b, d.augment.head_dim);
    let widths = |b: &mut Vec<u8>, layers: &[LayerWidth]| {
        u32le(b, layers.len());
        for l in layers {
            u32le(b, l.heads);
            u32le(b, l.head_dim);
        }
    };
    widths(&mut b, &d.stage1_layers);
    u32le(&mut b, d.phase_hidden[0]);
    u32le(&mut b, d.phase_hidden[1]);
    widths(&mut b, &d.stage2_layers);
    u32le(&mut b, d.head_hidden);
    for s in model.scaling.to_array() {
        b.extend_from_slice(&s.to_le_bytes());
    }
    u32le(&mut b, model.params.len());
    for (name, p) in model.params.iter() {
        u32le(&mut b, name.len());
        b.extend_from_slice(name.as_bytes());
        u32le(&mut b, p.shape.len());
        for &s in &p.shape {
            b.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for v in p.value.iter() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

/// Writes the checkpoint through a temporary file in the target directory.
pub fn save_checkpoint(model: &HgnnModel, path: &Path) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        w.write_all(&encode_checkpoint(model)).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))?;
    }
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.bad("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn bad(&self, detail: &str) -> TrainError {
        TrainError::Checkpoint {
            path: self.path.to_path_buf(),
            detail: detail.to_string(),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| self.bad("dimension overflows usize"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn widths(&mut self) -> Result<Vec<LayerWidth>> {
        let n = self.u32()?;
        (0..n).map(|_| Ok(LayerWidth::new(self.u32()?, self.u32()?))).collect()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<HgnnModel> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io_err(path))?)
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let mut c = Cursor { bytes: &bytes, pos: 0, path };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(c.bad("bad magic"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(c.bad(&format!("unsupported version {version}")));
    }
    let n_t = c.u32()?;
    let head = HeadKind::from_code(c.u8()?).ok_or_else(|| c.bad("unknown head code"))?;
    let fl = c.u8()?;
    if fl > 3 {
        return Err(c.bad("unknown flag bits"));
    }
    let flags = ModelFlags {
        residual: fl & 1 != 0,
        two_stage: fl & 2 != 0,
    };
    let lift = c.u32()?;
    let augment = LayerWidth::new(c.u32()?, c.u32()?);
    let stage1_layers = c.widths()?;
    let phase_hidden = [c.u32()?, c.u32()?];
    let stage2_layers = c.widths()?;
    let head_hidden = c.u32()?;
    let dims = ModelDims {
        lift,
        augment,
        stage1_layers,
        phase_hidden,
        stage2_layers,
        head_hidden,
    };
    let scaling = InputScaling::from_array([c.f64()?, c.f64()?, c.f64()?, c.f64()?, c.f64()?]);
    let mut model = HgnnModel::new(n_t, dims, head, flags, scaling, 0)?;
    let count = c.u32()?;
    if count != model.params.len() {
        return Err(c.bad(&format!("expected {} parameters, found {count}", model.params.len())));
    }
    let mut loaded = ModelParams::new();
    for _ in 0..count {
        let len = c.u32()?;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| c.bad("parameter name is not UTF-8"))?;
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
        let expected = model
            .params
            .get(&name)
            .ok_or_else(|| c.bad(&format!("unexpected parameter `{name}`")))?;
        if expected.shape != shape {
            return Err(c.bad(&format!("parameter `{name}` has shape {shape:?}, expected {:?}", expected.shape)));
        }
        let n = shape.iter().product();
        let values = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        loaded.insert(name, &shape, values)?;
    }
    if c.pos != bytes.len() {
        return Err(c.bad("trailing bytes"));
    }
    model.params = loaded;
    Ok(model)
}
