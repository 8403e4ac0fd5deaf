//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{OdexError, Result};
use crate::learner::{FeatureTap, LearnerConfig};
use crate::pool::{Strategy, POOL_EPS_SCALE};
use crate::stream::Scenario;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Odex,
    Seq,
    Joint,
    Ewc,
    AlwaysExpand,
    Dicex,
    NoHistory,
    Gram,
    Static,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Odex,
        Method::Seq,
        Method::Joint,
        Method::Ewc,
        Method::AlwaysExpand,
        Method::Dicex,
        Method::NoHistory,
        Method::Gram,
        Method::Static,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Odex => "odex",
            Method::Seq => "seq",
            Method::Joint => "joint",
            Method::Ewc => "ewc",
            Method::AlwaysExpand => "always_expand",
            Method::Dicex => "dicex",
            Method::NoHistory => "no_history",
            Method::Gram => "gram",
            Method::Static => "static",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| OdexError::UnknownStrategy(s.to_string()))
    }

    /// Pool strategy backing this method, if it is pool based.
    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Method::Odex => Some(Strategy::Odex),
            Method::AlwaysExpand => Some(Strategy::AlwaysExpand),
            Method::Dicex => Some(Strategy::DICE_EXPAND),
            Method::NoHistory => Some(Strategy::NoHistory),
            Method::Gram => Some(Strategy::Gram),
            Method::Seq | Method::Joint | Method::Ewc | Method::Static => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    pub n_stages: usize,
    pub samples_per_stage: usize,
    pub test_per_stage: usize,
    pub image_size: usize,
    /// Learner settings; `seed` is replaced per run.
    pub learner: LearnerConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Load the stream from here instead of generating it.
    pub stream_dir: Option<PathBuf>,
    pub ewc_lambda: f64,
    pub eps_scale: f64,
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::ShiftingSource,
            methods: vec![Method::Odex],
            n_stages: 5,
            samples_per_stage: 200,
            test_per_stage: 50,
            image_size: 32,
            learner: LearnerConfig::default(),
            seeds: vec![1],
            output_dir: PathBuf::from("results"),
            stream_dir: None,
            ewc_lambda: crate::baselines::EWC_LAMBDA,
            eps_scale: POOL_EPS_SCALE,
            save_checkpoints: true,
        }
    }
}

/// Every recognized key, in the order [`ExperimentConfig::to_kv_text`] writes them.
pub const CONFIG_KEYS: [&str; 21] = [
    "scenario",
    "methods",
    "n_stages",
    "samples_per_stage",
    "test_per_stage",
    "image_size",
    "seeds",
    "output_dir",
    "stream_dir",
    "ewc_lambda",
    "eps_scale",
    "save_checkpoints",
    "channels",
    "learning_rate",
    "momentum",
    "weight_decay",
    "epochs_per_stage",
    "batch_size",
    "dice_smoothing",
    "feature_tap",
    "kernel_size",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| OdexError::InvalidConfig(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(OdexError::InvalidConfig(format!("{key}: expected a boolean, got {other:?}"))),
    }
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split([',', ' ']).map(str::trim).filter(|s| !s.is_empty())
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "scenario" => self.scenario = Scenario::parse(v)?,
            "methods" => self.methods = split_list(v).map(Method::parse).collect::<Result<_>>()?,
            "n_stages" => self.n_stages = parse_num(key, v)?,
            "samples_per_stage" => self.samples_per_stage = parse_num(key, v)?,
            "test_per_stage" => self.test_per_stage = parse_num(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "seeds" => self.seeds = split_list(v).map(|s| parse_num(key, s)).collect::<Result<_>>()?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "stream_dir" => self.stream_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "ewc_lambda" => self.ewc_lambda = parse_num(key, v)?,
            "eps_scale" => self.eps_scale = parse_num(key, v)?,
            "save_checkpoints" => self.save_checkpoints = parse_bool(key, v)?,
            "channels" => self.learner.channels = parse_num(key, v)?,
            "learning_rate" => self.learner.learning_rate = parse_num(key, v)?,
            "momentum" => self.learner.momentum = parse_num(key, v)?,
            "weight_decay" => self.learner.weight_decay = parse_num(key, v)?,
            "epochs_per_stage" => self.learner.epochs_per_stage = parse_num(key, v)?,
            "batch_size" => self.learner.batch_size = parse_num(key, v)?,
            "dice_smoothing" => self.learner.dice_smoothing = parse_num(key, v)?,
            "feature_tap" => self.learner.feature_tap = FeatureTap::parse(v)?,
            "kernel_size" => self.learner.kernel_size = parse_num(key, v)?,
            other => return Err(OdexError::InvalidConfig(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are ignored.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| OdexError::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv_text(&fs::read_to_string(path)?)
    }

    pub fn to_kv_text(&self) -> String {
        let l = &self.learner;
        let methods: Vec<&str> = self.methods.iter().map(|m| m.name()).collect();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("scenario", self.scenario.name().to_string());
        kv("methods", methods.join(","));
        kv("n_stages", self.n_stages.to_string());
        kv("samples_per_stage", self.samples_per_stage.to_string());
        kv("test_per_stage", self.test_per_stage.to_string());
        kv("image_size", self.image_size.to_string());
        kv("seeds", seeds.join(","));
        kv("output_dir", self.output_dir.display().to_string());
        kv(
            "stream_dir",
            self.stream_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv("ewc_lambda", format!("{:?}", self.ewc_lambda));
        kv("eps_scale", format!("{:?}", self.eps_scale));
        kv("save_checkpoints", self.save_checkpoints.to_string());
        kv("channels", l.channels.to_string());
        kv("learning_rate", format!("{:?}", l.learning_rate));
        kv("momentum", format!("{:?}", l.momentum));
        kv("weight_decay", format!("{:?}", l.weight_decay));
        kv("epochs_per_stage", l.epochs_per_stage.to_string());
        kv("batch_size", l.batch_size.to_string());
        kv("dice_smoothing", format!("{:?}", l.dice_smoothing));
        kv("feature_tap", l.feature_tap.name().to_string());
        kv("kernel_size", l.kernel_size.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(OdexError::InvalidConfig("at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(OdexError::InvalidConfig("at least one seed is required".into()));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(OdexError::InvalidConfig(format!("seed {s} listed twice")));
            }
        }
        if self.n_stages == 0 {
            return Err(OdexError::InvalidConfig("n_stages must be at least 1".into()));
        }
        if self.samples_per_stage < 2 || self.test_per_stage == 0 {
            return Err(OdexError::InvalidConfig(
                "need at least 2 training and 1 test sample per stage".into(),
            ));
        }
        if !(self.eps_scale > 0.0) {
            return Err(OdexError::InvalidConfig("eps_scale must be positive".into()));
        }
        if !(self.ewc_lambda >= 0.0) {
            return Err(OdexError::InvalidConfig("ewc_lambda must be nonnegative".into()));
        }
        self.learner_for(self.seeds[0]).validate()
    }

    /// Learner configuration for one seed.
    pub fn learner_for(&self, seed: u64) -> LearnerConfig {
        LearnerConfig {
            height: self.image_size,
            width: self.image_size,
            seed,
            ..self.learner.clone()
        }
    }
}
