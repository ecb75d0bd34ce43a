//! Run configuration, the `QADP` checkpoint format, PGM maps and CSV reports.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::{ModelConfig, QAdaptModel};
use crate::staging::{builtin_strategies, StepRecord, Strategy, TrainConfig, DEFAULT_LR};
use crate::synth::DatasetConfig;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub strategy: String,
    pub seeds: Vec<u64>,
    pub lr: f64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            strategy: "progressive".into(),
            seeds: vec![0],
            lr: DEFAULT_LR,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dataset.validate()?;
        self.train.validate()?;
        if !builtin_strategies().contains_key(&self.strategy) {
            let names: Vec<String> = builtin_strategies().into_keys().collect();
            return Err(Error::Config(format!(
                "strategy: unknown `{}` (expected one of {})",
                self.strategy,
                names.join(", ")
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr: {} must be positive", self.lr)));
        }
        Ok(())
    }

    /// The configured strategy at the configured learning rate.
    pub fn strategy(&self) -> Result<Strategy> {
        self.strategy_named(&self.strategy)
    }

    pub fn strategy_named(&self, name: &str) -> Result<Strategy> {
        builtin_strategies()
            .remove(name)
            .map(|s| s.with_lr(self.lr))
            .ok_or_else(|| Error::Config(format!("strategy: unknown `{name}`")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }
}

// ---- checkpoint ------------------------------------------------------------

pub const MAGIC: &[u8; 4] = b"QADP";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// What a checkpoint records besides the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub seed: u64,
    /// 1-based index of the stage that produced the weights.
    pub stage: usize,
    /// Whether evaluation routes through the prompt module.
    pub use_prompt: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v =
        u32::try_from(v).map_err(|_| Error::Config(format!("checkpoint field {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Header, tensor table in store order, then a length-prefixed JSON trailer
/// with the metadata.
pub fn encode_checkpoint(model: &QAdaptModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, model.store.len())?;
    for (_, p) in model.store.iter() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.dims().len())?;
        for &d in p.value.dims() {
            put_u32(&mut out, d)?;
        }
        out.push(DTYPE_F32);
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let trailer = serde_json::to_vec(meta)?;
    put_u32(&mut out, trailer.len())?;
    out.extend_from_slice(&trailer);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::CheckpointParse {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic, not a QADP checkpoint");
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::CheckpointVersion(format!(
            "file version {version}, supported {VERSION}"
        )));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32("name length")?;
        let start = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::CheckpointParse {
                offset: start,
                msg: "name is not UTF-8".into(),
            })?
            .to_string();
        let ndim = r.u32("ndim")?;
        let mut dims = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            dims.push(r.u32("dim")?);
        }
        let tag = r.take(1, "dtype tag")?[0];
        if tag != DTYPE_F32 {
            return Err(Error::CheckpointVersion(format!(
                "unknown dtype tag {tag} for `{name}`"
            )));
        }
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(bytes) = numel.and_then(|n| n.checked_mul(4)) else {
            return r.fail(format!("dims {dims:?} of `{name}` overflow"));
        };
        let payload = r.take(bytes, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if tensors.contains_key(&name) {
            return r.fail(format!("duplicate tensor `{name}`"));
        }
        tensors.insert(name, Tensor::new(dims, data)?);
    }
    let len = r.u32("trailer length")?;
    let start = r.pos;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(len, "trailer")?).map_err(|e| Error::CheckpointParse {
            offset: start,
            msg: format!("trailer: {e}"),
        })?;
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn save_checkpoint(path: &Path, model: &QAdaptModel, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode_checkpoint(model, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

impl Checkpoint {
    /// Rebuilds the model the tensors came from: the architecture from the
    /// echoed config, a prompt module and adapters wherever their tensors
    /// are present, then every value.
    pub fn into_model(self) -> Result<(QAdaptModel, CheckpointMeta)> {
        let has = |prefix: &str, infix: &str| {
            self.tensors
                .keys()
                .any(|k| k.starts_with(prefix) && k.contains(infix))
        };
        let with_prompt = has("prompt.", "");
        let mut model =
            QAdaptModel::new(self.meta.config.model.clone(), self.meta.seed, with_prompt)?;
        if has("encoder.", ".lora.") {
            model.attach_lora(crate::params::ParamGroup::VisionLora)?;
        }
        if has("decoder.", ".lora.") {
            model.attach_lora(crate::params::ParamGroup::LlmLora)?;
        }
        let names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
        if let Some(missing) = names.iter().find(|n| !self.tensors.contains_key(*n)) {
            return Err(Error::Config(format!(
                "checkpoint lacks tensor `{missing}`"
            )));
        }
        if let Some(extra) = self.tensors.keys().find(|k| !names.contains(k)) {
            return Err(Error::Config(format!(
                "checkpoint tensor `{extra}` does not belong to the model"
            )));
        }
        for (name, t) in self.tensors {
            let id = model.store.id(&name).expect("names checked above");
            model.store.set_value(id, t)?;
        }
        model.store.freeze_all();
        Ok((model, self.meta))
    }
}

pub fn load_model(path: &Path) -> Result<(QAdaptModel, CheckpointMeta)> {
    read_checkpoint(path)?.into_model()
}

// ---- PGM -------------------------------------------------------------------

/// Binary P5, 8 bits; values in `[0, 1]` scaled by 255 and rounded.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    if map.dims().len() != 2 {
        return Err(Error::shape("encode_pgm", map.dims(), &[]));
    }
    let (h, w) = (map.rows(), map.cols());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        map.data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(map)?).map_err(|e| Error::io(path, e))
}

// ---- CSV -------------------------------------------------------------------

pub const TRAIN_HEADER: [&str; 4] = ["stage", "step", "lr", "loss"];
pub const METRICS_HEADER: [&str; 9] = [
    "strategy",
    "seed",
    "acc_mcq",
    "acc_yesno",
    "acc_howwhat",
    "srocc",
    "plcc",
    "expl_ppl",
    "dropped",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_row(r: &EvalReport) -> [String; 9] {
    [
        r.strategy.clone(),
        r.seed.to_string(),
        r.acc_mcq.to_string(),
        r.acc_yesno.to_string(),
        r.acc_howwhat.to_string(),
        opt(r.srocc),
        opt(r.plcc),
        r.expl_ppl.to_string(),
        r.dropped.to_string(),
    ]
}

pub fn write_train_csv(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRAIN_HEADER)?;
    for s in steps {
        w.write_record([
            s.stage.to_string(),
            s.step.to_string(),
            s.lr.to_string(),
            s.loss.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends one report row, writing the header first if the file is new.
pub fn append_metrics(path: &Path, report: &EvalReport) -> Result<()> {
    let fresh = !path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(METRICS_HEADER)?;
    }
    w.write_record(metrics_row(report))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
