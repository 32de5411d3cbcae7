//! Dataset persistence, CSV export and the experiment drivers behind the
//! command-line tool.
//!
//! Dataset layout (little-endian): magic `RISPLS1`, version `u32`,
//! `n_t l k m` as `u32`, sample count `u64`, scenario echo as `u32` length
//! plus JSON, then per sample the blocks `H`, `h_b[1..K]`, `h_r[1..K]`,
//! `f_b[1..M]`, `f_r[1..M]` as interleaved re/im `f64`, row-major. An
//! optional appendix `ORCL`, count `u64`, one oracle SEE `f64` per sample
//! follows the records.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use thiserror::Error;

use crate::baselines::{gradient_oracle_many, BaselineError, OracleConfig};
use crate::channel::{dbm_to_watt, sample_many, ChannelError, ChannelRealization, PowerBudget, ScenarioConfig};
use crate::model::{HeadKind, HgnnModel, ModelError, ModelFlags};
use crate::training::{evaluate, fit, fmt_f64, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, HarnessError>;

const DATASET_MAGIC: &[u8; 7] = b"RISPLS1";
const DATASET_VERSION: u32 = 1;
const ORACLE_MAGIC: &[u8; 4] = b"ORCL";

/// Caps the worker pool at `RISPLS_THREADS` when set. Call once, before any
/// parallel work.
pub fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("RISPLS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("RISPLS_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("cannot configure worker pool: {e}"))
}

/// Channel samples with the scenario that produced them and optional oracle
/// labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub scenario: ScenarioConfig,
    pub samples: Vec<ChannelRealization>,
    pub oracle: Option<Vec<f64>>,
}

fn record_len(n_t: usize, l: usize, k: usize, m: usize) -> usize {
    16 * (l * n_t + k * (n_t + l) + m * (n_t + l))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::result::Result<(), DatasetError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io(path))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        w.write_all(bytes).map_err(io(path))?;
        w.flush().map_err(io(path))?;
    }
    tmp.persist(path).map_err(|e| io(path)(e.error))?;
    Ok(())
}

impl DatasetFile {
    /// Draws `count` samples from `scenario` (sample indices `0..count`
    /// under `scenario.seed`).
    pub fn generate(scenario: &ScenarioConfig, count: usize) -> std::result::Result<Self, DatasetError> {
        Ok(DatasetFile {
            scenario: scenario.clone(),
            samples: sample_many(scenario, 0, count)?,
            oracle: None,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.scenario;
        let echo = serde_json::to_vec(s).expect("scenario serializes");
        let mut b = Vec::with_capacity(64 + echo.len() + self.samples.len() * record_len(s.n_t, s.l, s.k, s.m));
        b.extend_from_slice(DATASET_MAGIC);
        b.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for d in [s.n_t, s.l, s.k, s.m] {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        b.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        b.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        b.extend_from_slice(&echo);
        let mut put = |v: &[Complex64]| {
            for c in v {
                b.extend_from_slice(&c.re.to_le_bytes());
                b.extend_from_slice(&c.im.to_le_bytes());
            }
        };
        for ch in &self.samples {
            put(&ch.h);
            for block in [&ch.h_b, &ch.h_r, &ch.f_b, &ch.f_r] {
                for row in block {
                    put(row);
                }
            }
        }
        if let Some(labels) = &self.oracle {
            b.extend_from_slice(ORACLE_MAGIC);
            b.extend_from_slice(&(labels.len() as u64).to_le_bytes());
            for v in labels {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> std::result::Result<Self, DatasetError> {
        let mut r = ByteReader { bytes, pos: 0, path };
        if r.take(7)? != DATASET_MAGIC {
            return Err(r.bad("bad magic"));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION as usize {
            return Err(r.bad(&format!("unsupported version {version}")));
        }
        let (n_t, l, k, m) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let count = r.u64()?;
        let echo_len = r.u32()?;
        let scenario: ScenarioConfig =
            serde_json::from_slice(r.take(echo_len)?).map_err(|e| r.bad(&format!("scenario echo: {e}")))?;
        if (scenario.n_t, scenario.l, scenario.k, scenario.m) != (n_t, l, k, m) {
            return Err(r.bad("scenario echo disagrees with header dimensions"));
        }
        let body = count
            .checked_mul(record_len(n_t, l, k, m))
            .ok_or_else(|| r.bad("sample count overflows"))?;
        if r.remaining() < body {
            return Err(r.bad("truncated file"));
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let h = r.complex(l * n_t)?;
            let h_b = (0..k).map(|_| r.complex(n_t)).collect::<std::result::Result<_, _>>()?;
            let h_r = (0..k).map(|_| r.complex(l)).collect::<std::result::Result<_, _>>()?;
            let f_b = (0..m).map(|_| r.complex(n_t)).collect::<std::result::Result<_, _>>()?;
            let f_r = (0..m).map(|_| r.complex(l)).collect::<std::result::Result<_, _>>()?;
            samples.push(ChannelRealization {
                n_t,
                l,
                k,
                m,
                h,
                h_b,
                h_r,
                f_b,
                f_r,
                sigma2: vec![dbm_to_watt(scenario.noise_dbm); k],
                sigma2_e: vec![dbm_to_watt(scenario.eve_noise_dbm); m],
            });
        }
        let oracle = if r.remaining() == 0 {
            None
        } else {
            if r.take(4)? != ORACLE_MAGIC {
                return Err(r.bad("unknown trailing section"));
            }
            let n = r.u64()?;
            if n != count {
                return Err(r.bad(&format!("{n} oracle labels for {count} samples")));
            }
            let labels = (0..n).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
            if r.remaining() != 0 {
                return Err(r.bad("trailing bytes"));
            }
            Some(labels)
        };
        Ok(DatasetFile {
            scenario,
            samples,
            oracle,
        })
    }

    pub fn write(&self, path: &Path) -> std::result::Result<(), DatasetError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> std::result::Result<Self, DatasetError> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(io(path))?)
            .read_to_end(&mut bytes)
            .map_err(io(path))?;
        Self::from_bytes(&bytes, path)
    }

    /// Oracle labels, or a usage error naming the file.
    pub fn labels(&self, path: &Path) -> Result<&[f64]> {
        self.oracle.as_deref().ok_or_else(|| {
            HarnessError::Usage(format!("{} has no oracle labels; run `label` first", path.display()))
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn bad(&self, detail: &str) -> DatasetError {
        DatasetError::Format {
            path: self.path.to_path_buf(),
            detail: detail.to_string(),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], DatasetError> {
        if self.remaining() < n {
            return Err(self.bad("truncated file"));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> std::result::Result<usize, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> std::result::Result<usize, DatasetError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| self.bad("count overflows usize"))
    }

    fn f64(&mut self) -> std::result::Result<f64, DatasetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn complex(&mut self, n: usize) -> std::result::Result<Vec<Complex64>, DatasetError> {
        (0..n).map(|_| Ok(Complex64::new(self.f64()?, self.f64()?))).collect()
    }
}

/// Writes a header row and data rows as UTF-8 CSV through a temporary file.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> std::result::Result<(), DatasetError> {
    let csv_err = |source| DatasetError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
    write_atomic(path, &bytes)
}

/// Oracle labels for every sample of a dataset under its own budget.
pub fn label(data: &mut DatasetFile, cfg: &OracleConfig) -> Result<()> {
    let refs: Vec<&ChannelRealization> = data.samples.iter().collect();
    let results = gradient_oracle_many(&refs, &data.scenario.budget(), cfg)?;
    data.oracle = Some(results.iter().map(|r| r.see).collect());
    Ok(())
}

/// Default transmit-power grid in dBm.
pub fn default_power_grid() -> Vec<f64> {
    (0..12).map(|i| 3.0 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerPoint {
    pub budget_dbm: f64,
    pub mean_see: f64,
    pub mean_ratio: f64,
}

pub const POWER_COLUMNS: [&str; 3] = ["budget_dbm", "mean_see", "mean_ratio"];

pub fn power_rows(points: &[PowerPoint]) -> Vec<Vec<String>> {
    points
        .iter()
        .map(|p| vec![fmt_f64(p.budget_dbm), fmt_f64(p.mean_see), fmt_f64(p.mean_ratio)])
        .collect()
}

/// Evaluates one model over a transmit-power grid; every grid point gets
/// fresh oracle denominators at its own budget.
pub fn sweep_power(
    model: &HgnnModel,
    samples: &[ChannelRealization],
    p_c: f64,
    grid_dbm: &[f64],
    oracle: &OracleConfig,
) -> Result<Vec<PowerPoint>> {
    if samples.is_empty() {
        return Err(HarnessError::Usage("power sweep needs at least one sample".into()));
    }
    let refs: Vec<&ChannelRealization> = samples.iter().collect();
    let mut out = Vec::with_capacity(grid_dbm.len());
    for &dbm in grid_dbm {
        let budget = PowerBudget {
            p_max: dbm_to_watt(dbm),
            p_c,
        };
        let labels: Vec<f64> = gradient_oracle_many(&refs, &budget, oracle)?.iter().map(|r| r.see).collect();
        let report = evaluate(model, samples, &labels, &budget)?;
        if report.violations > 0 {
            return Err(HarnessError::Usage(format!("{} infeasible designs at {dbm} dBm", report.violations)));
        }
        out.push(PowerPoint {
            budget_dbm: dbm,
            mean_see: report.mean_see,
            mean_ratio: report.mean_ratio,
        });
    }
    Ok(out)
}

/// Desk-size counterpart of the seven generalization test settings as
/// `(L, K, M)`.
pub fn default_scale_grid() -> Vec<(usize, usize, usize)> {
    vec![(4, 2, 2), (4, 1, 2), (4, 3, 2), (3, 2, 2), (5, 2, 2), (4, 2, 1), (4, 2, 3)]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalePoint {
    pub l: usize,
    pub k: usize,
    pub m: usize,
    pub samples: usize,
    pub mean_see: f64,
    pub mean_ratio: f64,
    pub violations: usize,
    pub param_count: usize,
}

pub const SCALE_COLUMNS: [&str; 8] = ["l", "k", "m", "samples", "mean_see", "mean_ratio", "violations", "param_count"];

pub fn scale_rows(points: &[ScalePoint]) -> Vec<Vec<String>> {
    points
        .iter()
        .map(|p| {
            vec![
                p.l.to_string(),
                p.k.to_string(),
                p.m.to_string(),
                p.samples.to_string(),
                fmt_f64(p.mean_see),
                fmt_f64(p.mean_ratio),
                p.violations.to_string(),
                p.param_count.to_string(),
            ]
        })
        .collect()
}

/// Evaluates one model, unchanged, on freshly drawn and labeled test sets
/// for each `(L, K, M)` of the grid.
pub fn sweep_scale(
    model: &HgnnModel,
    scenario: &ScenarioConfig,
    grid: &[(usize, usize, usize)],
    count: usize,
    oracle: &OracleConfig,
) -> Result<Vec<ScalePoint>> {
    let mut out = Vec::with_capacity(grid.len());
    for &(l, k, m) in grid {
        let cfg = scenario.clone().with_dims(model.n_t, l, k, m);
        let mut data = DatasetFile::generate(&cfg, count)?;
        label(&mut data, oracle)?;
        let labels = data.oracle.as_deref().unwrap_or_default();
        let report = evaluate(model, &data.samples, labels, &cfg.budget())?;
        out.push(ScalePoint {
            l,
            k,
            m,
            samples: count,
            mean_see: report.mean_see,
            mean_ratio: report.mean_ratio,
            violations: report.violations,
            param_count: model.params.scalar_count(),
        });
    }
    Ok(out)
}

/// Held-out data for one ablation study.
pub struct AblationData<'a> {
    pub scenario: &'a ScenarioConfig,
    pub train: &'a [ChannelRealization],
    pub val: &'a [ChannelRealization],
    pub test: &'a [ChannelRealization],
    pub labels: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub residual: bool,
    pub two_stage: bool,
    pub best_val_see: f64,
    pub mean_see: f64,
    pub mean_ratio: f64,
    pub violations: usize,
}

pub const ABLATION_COLUMNS: [&str; 6] = ["residual", "two_stage", "best_val_see", "mean_see", "mean_ratio", "violations"];

pub fn ablation_rows(rows: &[AblationRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.residual.to_string(),
                r.two_stage.to_string(),
                fmt_f64(r.best_val_see),
                fmt_f64(r.mean_see),
                fmt_f64(r.mean_ratio),
                r.violations.to_string(),
            ]
        })
        .collect()
}

/// The four flag settings, full configuration first.
pub fn ablation_grid() -> [ModelFlags; 4] {
    [(true, true), (false, true), (true, false), (false, false)].map(|(residual, two_stage)| ModelFlags {
        residual,
        two_stage,
    })
}

/// Trains and evaluates one model per flag setting with otherwise identical
/// configuration; returns the rows and the trained models.
pub fn ablate(base: &TrainConfig, data: &AblationData) -> Result<Vec<(AblationRow, HgnnModel)>> {
    if data.labels.len() != data.test.len() {
        return Err(HarnessError::Usage("ablation test set needs one oracle label per sample".into()));
    }
    let budget = data.scenario.budget();
    let scaling = crate::hetgraph::InputScaling::from_scenario(data.scenario);
    let mut out = Vec::with_capacity(4);
    for flags in ablation_grid() {
        let cfg = TrainConfig { flags, ..base.clone() };
        let mut model = HgnnModel::new(data.scenario.n_t, cfg.dims.clone(), cfg.head, flags, scaling, cfg.seed)?;
        let report = fit(&mut model, data.train, data.val, &budget, &cfg, |_| {})?;
        let eval = evaluate(&model, data.test, data.labels, &budget)?;
        out.push((
            AblationRow {
                residual: flags.residual,
                two_stage: flags.two_stage,
                best_val_see: report.best_val_see,
                mean_see: eval.mean_see,
                mean_ratio: eval.mean_ratio,
                violations: eval.violations,
            },
            model,
        ));
    }
    Ok(out)
}

/// Head parsed from a command-line value.
pub fn parse_head(s: &str) -> Result<HeadKind> {
    s.parse().map_err(HarnessError::Usage)
}
