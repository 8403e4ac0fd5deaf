//! Pool checkpoints and score-tensor files.
//!
//! A checkpoint is a directory holding `manifest.txt` (key = value lines)
//! and one `entry_NNN.odxp` blob per model. Blob layout, little-endian:
//!
//! ```text
//! magic "ODXP" | version u32 | channels u32
//! model_id u32 | parent u32 | inherited_history u32
//! n_stages u32 | stage indices n_stages x u32
//! last_stage_train_dice f64
//! params P x f64 | velocity P x f64          (P = 9C + 9C² + 6C + C + 1)
//! bn1 running mean C x f64 | bn1 running var C x f64
//! bn2 running mean C x f64 | bn2 running var C x f64
//! has_calibration u32 | d_min f64 | d_max f64 | xi f64
//! history_len u32, then per entry:
//!   kind u32 (0 gaussian, 1 gram) | n_samples u64
//!   gaussian: eps f64 | mu C x f64 | sigma C² x f64 | precision C² x f64
//!   gram:     gram C² x f64
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::baselines::gram::GramMatrix;
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{OdexError, Result};
use crate::learner::{FeatureTap, Learner, LearnerConfig, Params};
use crate::metrics::ScoreTensor;
use crate::oodgate::{GaussianStats, History, ThresholdCalibration};
use crate::pool::{ModelEntry, ModelPool, Signature, Strategy};

pub const POOL_MAGIC: &str = "ODXP";
pub const POOL_VERSION: u32 = 1;
pub const SCORES_MAGIC: &str = "ODXT";
pub const SCORES_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.txt";

fn entry_file(model_id: usize) -> String {
    format!("entry_{model_id:03}.odxp")
}

pub fn encode_entry(entry: &ModelEntry) -> Vec<u8> {
    let c = entry.learner.channels();
    let mut w = ByteWriter::default();
    w.bytes(POOL_MAGIC.as_bytes());
    w.u32(POOL_VERSION);
    w.u32(c as u32);
    w.u32(entry.model_id as u32);
    w.u32(entry.parent as u32);
    w.u32(entry.inherited_history as u32);
    w.u32(entry.stages_trained.len() as u32);
    for &s in &entry.stages_trained {
        w.u32(s as u32);
    }
    w.f64(entry.last_stage_train_dice);
    let l = &entry.learner;
    w.f64s(&l.params.to_flat());
    w.f64s(&l.velocity.to_flat());
    for stats in [&l.bn1_running, &l.bn2_running] {
        w.f64s(&stats.mean);
        w.f64s(&stats.var);
    }
    match &entry.calibration {
        Some(cal) => {
            w.u32(1);
            w.f64s(&[cal.d_min, cal.d_max, cal.xi]);
        }
        None => {
            w.u32(0);
            w.f64s(&[0.0; 3]);
        }
    }
    w.u32(entry.history.len() as u32);
    for sig in &entry.history.entries {
        match sig {
            Signature::Gaussian(g) => {
                w.u32(0);
                w.u64(g.n_samples as u64);
                w.f64(g.regularization_eps);
                w.f64s(&g.mu);
                w.f64s(&g.sigma);
                w.f64s(&g.precision);
            }
            Signature::Gram(g) => {
                w.u32(1);
                w.u64(g.n_samples as u64);
                w.f64s(&g.gram);
            }
        }
    }
    w.buf
}

pub fn decode_entry(bytes: &[u8], path: &Path, config: &LearnerConfig) -> Result<ModelEntry> {
    let mut r = ByteReader::new(bytes, path);
    r.header(POOL_MAGIC, POOL_VERSION)?;
    let c = r.u32()? as usize;
    if c != config.channels {
        return Err(r.corrupt(format!("blob has {c} channels, manifest says {}", config.channels)));
    }
    let model_id = r.u32()? as usize;
    let parent = r.u32()? as usize;
    let inherited_history = r.u32()? as usize;
    let n_stages = r.u32()? as usize;
    if n_stages > bytes.len() / 4 {
        return Err(r.corrupt("implausible stage count"));
    }
    let stages_trained = (0..n_stages).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
    let last_stage_train_dice = r.f64()?;

    let mut learner = Learner::new(config, config.seed)?;
    let n_params = learner.params.len();
    learner.params.copy_from_flat(&r.f64s(n_params)?)?;
    let mut velocity = Params::zeros(c);
    velocity.copy_from_flat(&r.f64s(n_params)?)?;
    learner.velocity = velocity;
    for stats in [&mut learner.bn1_running, &mut learner.bn2_running] {
        stats.mean = r.f64s(c)?;
        stats.var = r.f64s(c)?;
        if stats.var.iter().any(|v| !(*v > 0.0)) {
            return Err(r.corrupt("nonpositive running variance"));
        }
    }
    let has_cal = r.u32()?;
    let cal = r.f64s(3)?;
    let calibration = match has_cal {
        0 => None,
        1 => Some(ThresholdCalibration {
            d_min: cal[0],
            d_max: cal[1],
            xi: cal[2],
        }),
        k => return Err(r.corrupt(format!("bad calibration flag {k}"))),
    };
    let history_len = r.u32()? as usize;
    if history_len > bytes.len() / 8 {
        return Err(r.corrupt("implausible history length"));
    }
    let mut entries = Vec::with_capacity(history_len);
    for _ in 0..history_len {
        let kind = r.u32()?;
        let n_samples = r.u64()? as usize;
        entries.push(match kind {
            0 => Signature::Gaussian(GaussianStats {
                regularization_eps: r.f64()?,
                mu: r.f64s(c)?,
                sigma: r.f64s(c * c)?,
                precision: r.f64s(c * c)?,
                n_samples,
            }),
            1 => Signature::Gram(GramMatrix {
                gram: r.f64s(c * c)?,
                n_samples,
            }),
            k => return Err(r.corrupt(format!("unknown history entry kind {k}"))),
        });
    }
    if !r.is_done() {
        return Err(r.corrupt("trailing bytes after history"));
    }
    Ok(ModelEntry {
        model_id,
        learner,
        history: History::new(entries),
        calibration,
        last_stage_train_dice,
        stages_trained,
        parent,
        inherited_history,
    })
}

fn strategy_to_text(s: &Strategy) -> String {
    match s {
        Strategy::DiceExpand {
            drop_ratio,
            probe_epochs,
        } => format!("dicex:{drop_ratio:?}:{probe_epochs}"),
        other => other.name().to_string(),
    }
}

fn strategy_from_text(s: &str) -> Result<Strategy> {
    let mut parts = s.split(':');
    let name = parts.next().unwrap_or("");
    match Strategy::parse(name)? {
        Strategy::DiceExpand { .. } => {
            let drop_ratio = parts.next().map(str::parse).transpose().ok().flatten().unwrap_or(0.9);
            let probe_epochs = parts.next().map(str::parse).transpose().ok().flatten().unwrap_or(1);
            Ok(Strategy::DiceExpand {
                drop_ratio,
                probe_epochs,
            })
        }
        other => Ok(other),
    }
}

fn manifest_text(pool: &ModelPool, scenario: &str, stage_reached: usize) -> String {
    let l = &pool.config;
    let mut lines = vec![
        "format = odex-pool".to_string(),
        format!("version = {POOL_VERSION}"),
        format!("scenario = {scenario}"),
        format!("stage_reached = {stage_reached}"),
        format!("strategy = {}", strategy_to_text(&pool.strategy)),
        format!("eps_scale = {:?}", pool.eps_scale),
        format!("next_id = {}", pool.next_id),
        format!("entry_count = {}", pool.entries.len()),
        format!("channels = {}", l.channels),
        format!("kernel_size = {}", l.kernel_size),
        format!("learning_rate = {:?}", l.learning_rate),
        format!("momentum = {:?}", l.momentum),
        format!("weight_decay = {:?}", l.weight_decay),
        format!("epochs_per_stage = {}", l.epochs_per_stage),
        format!("batch_size = {}", l.batch_size),
        format!("dice_smoothing = {:?}", l.dice_smoothing),
        format!("height = {}", l.height),
        format!("width = {}", l.width),
        format!("seed = {}", l.seed),
        format!("feature_tap = {}", l.feature_tap.name()),
    ];
    for e in &pool.entries {
        let stages: Vec<String> = e.stages_trained.iter().map(usize::to_string).collect();
        lines.push(format!(
            "entry.{} = {} parent={} history={} stages={} xi={}",
            e.model_id,
            entry_file(e.model_id),
            e.parent,
            e.history.len(),
            stages.join(","),
            e.calibration.map(|c| format!("{:?}", c.xi)).unwrap_or_else(|| "none".into())
        ));
    }
    lines.join("\n") + "\n"
}

/// Writes the manifest and one blob per entry into `dir`.
pub fn save_pool(pool: &ModelPool, dir: &Path, scenario: &str, stage_reached: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    for e in &pool.entries {
        fs::write(dir.join(entry_file(e.model_id)), encode_entry(e))?;
    }
    fs::write(dir.join(MANIFEST), manifest_text(pool, scenario, stage_reached))?;
    Ok(())
}

/// Single-learner methods are stored as a one-entry pool without history.
pub fn save_learner(learner: &Learner, dir: &Path, scenario: &str, stage_reached: usize) -> Result<()> {
    let mut pool = ModelPool::new(learner.config.clone(), Strategy::Odex)?;
    pool.entries.push(ModelEntry {
        model_id: 1,
        learner: learner.clone(),
        history: History::default(),
        calibration: None,
        last_stage_train_dice: 0.0,
        stages_trained: Vec::new(),
        parent: 0,
        inherited_history: 0,
    });
    pool.next_id = 2;
    save_pool(&pool, dir, scenario, stage_reached)
}

/// Parsed `manifest.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub values: BTreeMap<String, String>,
}

impl Manifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    let mut values = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| OdexError::CorruptCheckpoint {
            path: path.clone(),
            message: format!("bad manifest line {line:?}"),
        })?;
        values.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(Manifest { values })
}

pub fn load_pool(dir: &Path) -> Result<ModelPool> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(MANIFEST);
    let corrupt = |message: String| OdexError::CorruptCheckpoint {
        path: path.clone(),
        message,
    };
    let need = |key: &str| manifest.get(key).ok_or_else(|| corrupt(format!("missing key {key}")));
    fn num<T: std::str::FromStr>(v: &str, key: &str, path: &Path) -> Result<T> {
        v.parse().map_err(|_| OdexError::CorruptCheckpoint {
            path: path.to_path_buf(),
            message: format!("bad value for {key}: {v:?}"),
        })
    }
    if need("format")? != "odex-pool" {
        return Err(corrupt("not an odex pool manifest".into()));
    }
    let version: u32 = num(need("version")?, "version", &path)?;
    if version != POOL_VERSION {
        return Err(OdexError::VersionMismatch {
            path: path.clone(),
            found: version,
            expected: POOL_VERSION,
        });
    }
    let config = LearnerConfig {
        channels: num(need("channels")?, "channels", &path)?,
        kernel_size: num(need("kernel_size")?, "kernel_size", &path)?,
        learning_rate: num(need("learning_rate")?, "learning_rate", &path)?,
        momentum: num(need("momentum")?, "momentum", &path)?,
        weight_decay: num(need("weight_decay")?, "weight_decay", &path)?,
        epochs_per_stage: num(need("epochs_per_stage")?, "epochs_per_stage", &path)?,
        batch_size: num(need("batch_size")?, "batch_size", &path)?,
        dice_smoothing: num(need("dice_smoothing")?, "dice_smoothing", &path)?,
        height: num(need("height")?, "height", &path)?,
        width: num(need("width")?, "width", &path)?,
        seed: num(need("seed")?, "seed", &path)?,
        feature_tap: FeatureTap::parse(need("feature_tap")?)?,
    };
    let mut pool = ModelPool::new(config.clone(), strategy_from_text(need("strategy")?)?)?;
    pool.eps_scale = num(need("eps_scale")?, "eps_scale", &path)?;
    pool.next_id = num(need("next_id")?, "next_id", &path)?;
    let count: usize = num(need("entry_count")?, "entry_count", &path)?;
    for id in 1..pool.next_id {
        let Some(spec) = manifest.get(&format!("entry.{id}")) else {
            continue;
        };
        let file = spec.split_whitespace().next().unwrap_or("");
        let blob_path = dir.join(file);
        let bytes = fs::read(&blob_path)?;
        let entry = decode_entry(&bytes, &blob_path, &config)?;
        if entry.model_id != id {
            return Err(corrupt(format!("{file} holds model {} not {id}", entry.model_id)));
        }
        pool.entries.push(entry);
    }
    if pool.entries.len() != count {
        return Err(corrupt(format!("manifest lists {count} entries, found {}", pool.entries.len())));
    }
    Ok(pool)
}

pub fn encode_scores(scores: &ScoreTensor) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(SCORES_MAGIC.as_bytes());
    w.u32(SCORES_VERSION);
    w.u32(scores.dice.len() as u32);
    w.u32(scores.n_tasks() as u32);
    for row in &scores.dice {
        for task in row {
            w.u32(task.len() as u32);
            w.f64s(task);
        }
    }
    w.buf
}

pub fn save_scores(scores: &ScoreTensor, path: &Path) -> Result<()> {
    fs::write(path, encode_scores(scores))?;
    Ok(())
}

pub fn load_scores(path: &Path) -> Result<ScoreTensor> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes, path);
    r.header(SCORES_MAGIC, SCORES_VERSION)?;
    let rows = r.u32()? as usize;
    let tasks = r.u32()? as usize;
    if rows.saturating_mul(tasks) > bytes.len() / 4 {
        return Err(r.corrupt("implausible tensor shape"));
    }
    let mut dice = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut row = Vec::with_capacity(tasks);
        for _ in 0..tasks {
            let n = r.u32()? as usize;
            row.push(r.f64s(n)?);
        }
        dice.push(row);
    }
    if !r.is_done() {
        return Err(r.corrupt("trailing bytes after score tensor"));
    }
    Ok(ScoreTensor { dice })
}
