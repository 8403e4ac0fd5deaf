//! Model-pool controller: picks the model whose history is closest to the
//! incoming stage, decides between further training and expansion, and
//! routes each test image to the closest model.

use std::fmt;

use crate::baselines::gram::{fit_gram, GramMatrix};
use crate::baselines::stage_shuffle_seed;
use crate::error::{OdexError, Result};
use crate::learner::{FeatureVector, Learner, LearnerConfig};
use crate::metrics::Segmenter;
use crate::oodgate::{
    calibrate_threshold, fit_gaussian, normalize_distance, stage_distance, summed_history_distance, GaussianStats,
    History, StageStatistic, ThresholdCalibration,
};
use crate::sample::{Image, Mask, Sample};
use crate::stream::mix_seed;

/// Covariance ridge used for the pool's stage Gaussians, as a multiple of
/// `trace(Σ) / C`. Pooled BN1 features of a small network are close to
/// rank-deficient; a strong ridge keeps inherited entries comparable after
/// the owning model keeps training.
pub const POOL_EPS_SCALE: f64 = 1.0;

/// How the pool decides when to grow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    /// Summed-history Mahalanobis distance against a calibrated threshold.
    Odex,
    /// A new model for every stage (threshold of minus infinity).
    AlwaysExpand,
    /// Expand when a short probe fine-tune drops the training Dice below
    /// `drop_ratio` times the model's last training Dice.
    DiceExpand { drop_ratio: f64, probe_epochs: usize },
    /// Only the newest Gaussian is kept in each history.
    NoHistory,
    /// Feature Gram matrices with Frobenius distance in place of Gaussians.
    Gram,
}

impl Strategy {
    pub const DICE_EXPAND: Strategy = Strategy::DiceExpand {
        drop_ratio: 0.9,
        probe_epochs: 1,
    };

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Odex => "odex",
            Strategy::AlwaysExpand => "always_expand",
            Strategy::DiceExpand { .. } => "dicex",
            Strategy::NoHistory => "no_history",
            Strategy::Gram => "gram",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "odex" => Ok(Strategy::Odex),
            "always_expand" => Ok(Strategy::AlwaysExpand),
            "dicex" | "dice_expand" => Ok(Strategy::DICE_EXPAND),
            "no_history" => Ok(Strategy::NoHistory),
            "gram" => Ok(Strategy::Gram),
            other => Err(OdexError::UnknownStrategy(other.to_string())),
        }
    }

    fn keeps_full_history(&self) -> bool {
        !matches!(self, Strategy::NoHistory)
    }
}

/// One entry of a model's history.
#[derive(Clone, Debug, PartialEq)]
pub enum Signature {
    Gaussian(GaussianStats),
    Gram(GramMatrix),
}

impl StageStatistic for Signature {
    fn dim(&self) -> usize {
        match self {
            Signature::Gaussian(g) => g.dim(),
            Signature::Gram(g) => g.dim(),
        }
    }

    fn distance(&self, z: &FeatureVector) -> Result<f64> {
        match self {
            Signature::Gaussian(g) => g.distance(z),
            Signature::Gram(g) => g.distance(z),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelEntry {
    pub model_id: usize,
    pub learner: Learner,
    pub history: History<Signature>,
    pub calibration: Option<ThresholdCalibration>,
    pub last_stage_train_dice: f64,
    /// Stages that shaped this model, including those inherited from its parent.
    pub stages_trained: Vec<usize>,
    /// Model this entry was cloned from (0 for a fresh start).
    pub parent: usize,
    /// History length copied from the parent at cloning time.
    pub inherited_history: usize,
}

impl ModelEntry {
    /// Summed distance of one image to this entry's history, measured in this
    /// entry's own feature space.
    pub fn image_distance(&self, image: &Image) -> Result<f64> {
        let z = self.learner.extract_features(&[image])?.remove(0);
        summed_history_distance(&self.history, &z)
    }

    fn stage_distance(&self, stage_data: &[Sample]) -> Result<f64> {
        let feats = self.learner.extract_sample_features(stage_data)?;
        stage_distance(&self.history, &feats)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecisionKind {
    Reuse,
    Expand,
}

/// What triggered the decision, with the numbers needed to recheck it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecisionRule {
    FirstStage,
    /// Reuse iff `normalized_distance < threshold`.
    Distance,
    DiceDrop { probe_dice: f64, reference_dice: f64, drop_ratio: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionDecision {
    pub stage_index: usize,
    pub kind: DecisionKind,
    /// Model selected by minimum summed distance; 0 when the pool was empty.
    pub selected_model: usize,
    pub raw_distance: f64,
    pub normalized_distance: f64,
    pub threshold: f64,
    pub calibration: Option<ThresholdCalibration>,
    pub rule: DecisionRule,
    /// `(model_id, stage distance)` for every candidate.
    pub candidates: Vec<(usize, f64)>,
    /// Id of the model trained in this stage (filled in by `train_on_stage`).
    pub trained_model: usize,
}

impl fmt::Display for ExpansionDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage={} kind={:?} selected={} trained={} raw={:.9e} normalized={:.9e} xi={:.9e}",
            self.stage_index,
            self.kind,
            self.selected_model,
            self.trained_model,
            self.raw_distance,
            self.normalized_distance,
            self.threshold
        )?;
        if let Some(c) = &self.calibration {
            write!(f, " d_min={:.9e} d_max={:.9e}", c.d_min, c.d_max)?;
        }
        match self.rule {
            DecisionRule::FirstStage => write!(f, " rule=first_stage")?,
            DecisionRule::Distance => write!(f, " rule=distance")?,
            DecisionRule::DiceDrop {
                probe_dice,
                reference_dice,
                drop_ratio,
            } => write!(f, " rule=dice_drop probe={probe_dice:.6} reference={reference_dice:.6} ratio={drop_ratio}")?,
        }
        let cands: Vec<String> = self.candidates.iter().map(|(id, d)| format!("{id}:{d:.9e}")).collect();
        write!(f, " candidates=[{}]", cands.join(","))
    }
}

/// Lowest distance wins; ties go to the lowest model id.
pub fn argmin_model(distances: &[(usize, f64)]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &(id, d) in distances {
        best = match best {
            Some((bid, bd)) if !(d < bd || (d == bd && id < bid)) => Some((bid, bd)),
            _ => Some((id, d)),
        };
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelPool {
    pub entries: Vec<ModelEntry>,
    pub next_id: usize,
    pub config: LearnerConfig,
    pub strategy: Strategy,
    pub eps_scale: f64,
    pub decisions: Vec<ExpansionDecision>,
}

impl ModelPool {
    pub fn new(config: LearnerConfig, strategy: Strategy) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            entries: Vec::new(),
            next_id: 1,
            config,
            strategy,
            eps_scale: POOL_EPS_SCALE,
            decisions: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, model_id: usize) -> Option<&ModelEntry> {
        self.entries.iter().find(|e| e.model_id == model_id)
    }

    fn index_of(&self, model_id: usize) -> usize {
        self.entries
            .iter()
            .position(|e| e.model_id == model_id)
            .expect("model id comes from this pool")
    }

    /// Stage distance of every entry, each measured with its own learner.
    pub fn candidate_distances(&self, stage_data: &[Sample]) -> Result<Vec<(usize, f64)>> {
        self.entries
            .iter()
            .map(|e| Ok((e.model_id, e.stage_distance(stage_data)?)))
            .collect()
    }

    /// The entry minimizing the mean summed history distance to the stage.
    pub fn select_model(&self, stage_data: &[Sample]) -> Result<(usize, f64)> {
        if self.entries.is_empty() {
            return Err(OdexError::EmptyPool);
        }
        if stage_data.is_empty() {
            return Err(OdexError::EmptyInput("stage data"));
        }
        argmin_model(&self.candidate_distances(stage_data)?).ok_or(OdexError::EmptyPool)
    }

    /// Reuse the closest model or expand from it.
    pub fn decide(&self, stage_data: &[Sample], stage_index: usize) -> Result<ExpansionDecision> {
        if self.entries.is_empty() {
            return Ok(ExpansionDecision {
                stage_index,
                kind: DecisionKind::Expand,
                selected_model: 0,
                raw_distance: f64::NAN,
                normalized_distance: f64::NAN,
                threshold: f64::NAN,
                calibration: None,
                rule: DecisionRule::FirstStage,
                candidates: Vec::new(),
                trained_model: 0,
            });
        }
        if stage_data.is_empty() {
            return Err(OdexError::EmptyInput("stage data"));
        }
        let candidates = self.candidate_distances(stage_data)?;
        let (selected, raw) = argmin_model(&candidates).ok_or(OdexError::EmptyPool)?;
        let entry = &self.entries[self.index_of(selected)];
        let cal = entry
            .calibration
            .ok_or_else(|| OdexError::InvalidConfig(format!("model {selected} has no calibration")))?;
        let normalized = normalize_distance(&cal, raw);

        let (kind, threshold, rule) = match self.strategy {
            Strategy::AlwaysExpand => (DecisionKind::Expand, f64::NEG_INFINITY, DecisionRule::Distance),
            Strategy::DiceExpand {
                drop_ratio,
                probe_epochs,
            } => {
                let mut probe = entry.learner.clone();
                let seed = mix_seed(self.config.seed, 0xD1CE_0000 + stage_index as u64);
                let log = probe.train_epochs(stage_data, probe_epochs, seed, None)?;
                let probe_dice = log.final_train_dice().unwrap_or(entry.last_stage_train_dice);
                let kind = if probe_dice < drop_ratio * entry.last_stage_train_dice {
                    DecisionKind::Expand
                } else {
                    DecisionKind::Reuse
                };
                (
                    kind,
                    cal.xi,
                    DecisionRule::DiceDrop {
                        probe_dice,
                        reference_dice: entry.last_stage_train_dice,
                        drop_ratio,
                    },
                )
            }
            Strategy::Odex | Strategy::NoHistory | Strategy::Gram => {
                let kind = if normalized < cal.xi {
                    DecisionKind::Reuse
                } else {
                    DecisionKind::Expand
                };
                (kind, cal.xi, DecisionRule::Distance)
            }
        };
        Ok(ExpansionDecision {
            stage_index,
            kind,
            selected_model: selected,
            raw_distance: raw,
            normalized_distance: normalized,
            threshold,
            calibration: Some(cal),
            rule,
            candidates,
            trained_model: 0,
        })
    }

    fn fit_signature(&self, features: &[FeatureVector]) -> Result<Signature> {
        Ok(match self.strategy {
            Strategy::Gram => Signature::Gram(fit_gram(features)?),
            _ => Signature::Gaussian(fit_gaussian(features, self.eps_scale)?),
        })
    }

    /// Processes one stage: decide, train the chosen model, then append the
    /// refitted stage statistics to its history and recalibrate its threshold.
    pub fn train_on_stage(&mut self, stage_data: &[Sample], stage_index: usize) -> Result<ExpansionDecision> {
        if stage_data.is_empty() {
            return Err(OdexError::EmptyInput("stage data"));
        }
        let mut decision = self.decide(stage_data, stage_index)?;
        let idx = match decision.kind {
            DecisionKind::Reuse => self.index_of(decision.selected_model),
            DecisionKind::Expand => {
                let model_id = self.next_id;
                self.next_id += 1;
                let entry = match decision.selected_model {
                    0 => ModelEntry {
                        model_id,
                        learner: Learner::new(&self.config, self.config.seed)?,
                        history: History::default(),
                        calibration: None,
                        last_stage_train_dice: 0.0,
                        stages_trained: Vec::new(),
                        parent: 0,
                        inherited_history: 0,
                    },
                    parent_id => {
                        let parent = &self.entries[self.index_of(parent_id)];
                        let mut learner = parent.learner.clone();
                        learner.reset_optimizer();
                        ModelEntry {
                            model_id,
                            learner,
                            history: parent.history.clone(),
                            calibration: parent.calibration,
                            last_stage_train_dice: parent.last_stage_train_dice,
                            stages_trained: parent.stages_trained.clone(),
                            parent: parent_id,
                            inherited_history: parent.history.len(),
                        }
                    }
                };
                self.entries.push(entry);
                self.entries.len() - 1
            }
        };

        let shuffle_seed = stage_shuffle_seed(self.config.seed, stage_index, self.entries[idx].model_id);
        let log = self.entries[idx].learner.train_stage(stage_data, shuffle_seed)?;

        let features = self.entries[idx].learner.extract_sample_features(stage_data)?;
        let signature = self.fit_signature(&features)?;
        let keep_all = self.strategy.keeps_full_history();
        let entry = &mut self.entries[idx];
        if !keep_all {
            entry.history.entries.clear();
        }
        entry.history.push(signature);
        let in_dist = features
            .iter()
            .map(|z| summed_history_distance(&entry.history, z))
            .collect::<Result<Vec<f64>>>()?;
        entry.calibration = Some(calibrate_threshold(&in_dist)?);
        if let Some(d) = log.final_train_dice() {
            entry.last_stage_train_dice = d;
        }
        entry.stages_trained.push(stage_index);

        decision.trained_model = entry.model_id;
        self.decisions.push(decision.clone());
        Ok(decision)
    }

    /// Routes the image to the entry with the smallest summed history
    /// distance and thresholds that model's prediction at 0.5.
    pub fn infer(&self, image: &Image) -> Result<(Mask, usize)> {
        let chosen = self.route(image)?;
        let entry = &self.entries[self.index_of(chosen)];
        Ok((entry.learner.predict_mask(image)?, chosen))
    }

    pub fn route(&self, image: &Image) -> Result<usize> {
        match self.entries.as_slice() {
            [] => Err(OdexError::EmptyPool),
            [only] => Ok(only.model_id),
            entries => {
                let distances = entries
                    .iter()
                    .map(|e| Ok((e.model_id, e.image_distance(image)?)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(argmin_model(&distances).expect("nonempty").0)
            }
        }
    }

    /// Frozen copy for evaluation.
    pub fn snapshot(&self) -> PoolSnapshot {
        PoolSnapshot { pool: self.clone() }
    }
}

/// Immutable deployable pipeline captured after a stage.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolSnapshot {
    pool: ModelPool,
}

impl PoolSnapshot {
    pub fn pool(&self) -> &ModelPool {
        &self.pool
    }

    pub fn len(&self) -> usize {
        self.pool.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pool.is_empty()
    }

    pub fn infer(&self, image: &Image) -> Result<(Mask, usize)> {
        self.pool.infer(image)
    }
}

impl Segmenter for PoolSnapshot {
    fn segment(&self, image: &Image) -> Result<Mask> {
        Ok(self.pool.infer(image)?.0)
    }
}

impl Segmenter for Learner {
    fn segment(&self, image: &Image) -> Result<Mask> {
        self.predict_mask(image)
    }
}
