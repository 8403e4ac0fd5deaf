//! Comparison strategies sharing the learner and stream plumbing:
//! sequential fine-tuning, joint training, EWC, the pool ablations and the
//! static per-task matrix.

pub mod gram;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{OdexError, Result};
use crate::learner::{Learner, LearnerConfig, Params, Regularizer};
use crate::metrics::{dice, mean, Segmenter};
use crate::pool::{ModelPool, PoolSnapshot, Strategy};
use crate::sample::Sample;
use crate::stream::{mix_seed, Stage};

pub use gram::{fit_gram, GramMatrix};

pub const EWC_LAMBDA: f64 = 0.4;
pub const FISHER_BATCHES: usize = 16;

/// Shuffle seed used when model `model_id` trains on `stage_index`; shared
/// with the pool so that single-model methods follow identical trajectories.
pub fn stage_shuffle_seed(seed: u64, stage_index: usize, model_id: usize) -> u64 {
    mix_seed(seed, ((stage_index as u64) << 16) | model_id as u64)
}

fn check_stages(stages: &[Stage]) -> Result<()> {
    if stages.is_empty() {
        return Err(OdexError::EmptyInput("stream"));
    }
    Ok(())
}

/// One learner through all stages in order; a snapshot after each stage.
pub fn train_sequential(stages: &[Stage], config: &LearnerConfig) -> Result<Vec<Learner>> {
    check_stages(stages)?;
    let mut learner = Learner::new(config, config.seed)?;
    let mut snapshots = Vec::with_capacity(stages.len());
    for stage in stages {
        let k = stage.spec.stage_index;
        learner.train_stage(&stage.train, stage_shuffle_seed(config.seed, k, 1))?;
        snapshots.push(learner.clone());
    }
    Ok(snapshots)
}

/// A single learner on the union of every stage's training data, for
/// `n_stages * epochs_per_stage` epochs.
pub fn train_joint(stages: &[Stage], config: &LearnerConfig) -> Result<Learner> {
    check_stages(stages)?;
    let union: Vec<Sample> = stages.iter().flat_map(|s| s.train.iter().cloned()).collect();
    let mut learner = Learner::new(config, config.seed)?;
    let epochs = stages.len() * config.epochs_per_stage;
    learner.train_epochs(&union, epochs, mix_seed(config.seed, 0x10_1A7), None)?;
    Ok(learner)
}

/// Elementwise mean of squared gradients.
pub fn mean_squared_gradients<'a>(grads: impl IntoIterator<Item = &'a Params>) -> Result<Params> {
    let mut out: Option<Params> = None;
    let mut count = 0usize;
    for g in grads {
        let acc = out.get_or_insert_with(|| Params::zeros(g.conv1_b.len()));
        for (a, t) in acc.tensors_mut().into_iter().zip(g.tensors()) {
            for (ai, gi) in a.iter_mut().zip(t) {
                *ai += gi * gi;
            }
        }
        count += 1;
    }
    let mut out = out.ok_or(OdexError::EmptyInput("gradients"))?;
    for t in out.tensors_mut() {
        t.iter_mut().for_each(|v| *v /= count as f64);
    }
    Ok(out)
}

/// Diagonal empirical Fisher: one nonnegative weight per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiag(pub Params);

/// Mean squared loss gradient over `n_batches` randomly drawn minibatches.
pub fn fit_fisher(learner: &Learner, data: &[Sample], n_batches: usize, seed: u64) -> Result<FisherDiag> {
    if data.len() < 2 {
        return Err(OdexError::BatchTooSmall(data.len()));
    }
    if n_batches == 0 {
        return Err(OdexError::InvalidConfig("fisher needs at least one batch".into()));
    }
    let size = learner.config.batch_size.clamp(2, data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grads = (0..n_batches)
        .map(|_| {
            let batch: Vec<&Sample> = sample_indices(&mut rng, data.len(), size).iter().map(|i| &data[i]).collect();
            Ok(learner.gradients(&batch, None)?.grads)
        })
        .collect::<Result<Vec<Params>>>()?;
    Ok(FisherDiag(mean_squared_gradients(&grads)?))
}

/// Quadratic anchor `(λ/2) Σ F_p (θ_p - θ*_p)²` to the most recent reference.
#[derive(Clone, Debug, PartialEq)]
pub struct EwcState {
    pub reference: Params,
    pub fisher: FisherDiag,
    pub lambda: f64,
}

impl EwcState {
    pub fn new(reference: Params, fisher: FisherDiag, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(OdexError::InvalidConfig(format!("EWC lambda must be >= 0, got {lambda}")));
        }
        Ok(Self {
            reference,
            fisher,
            lambda,
        })
    }
}

impl Regularizer for EwcState {
    fn penalty(&self, params: &Params) -> f64 {
        let mut acc = 0.0;
        for ((t, r), f) in params.tensors().iter().zip(self.reference.tensors()).zip(self.fisher.0.tensors()) {
            for ((ti, ri), fi) in t.iter().zip(r).zip(f) {
                acc += fi * (ti - ri).powi(2);
            }
        }
        0.5 * self.lambda * acc
    }

    fn accumulate_gradient(&self, params: &Params, grad: &mut Params) {
        let refs = self.reference.tensors();
        let fisher = self.fisher.0.tensors();
        for (i, g) in grad.tensors_mut().into_iter().enumerate() {
            let t = params.tensors()[i];
            for (((gi, ti), ri), fi) in g.iter_mut().zip(t).zip(refs[i]).zip(fisher[i]) {
                *gi += self.lambda * fi * (ti - ri);
            }
        }
    }
}

/// Sequential training with an EWC penalty from the second stage on.
pub fn train_ewc(stages: &[Stage], config: &LearnerConfig, lambda: f64) -> Result<Vec<Learner>> {
    check_stages(stages)?;
    let mut learner = Learner::new(config, config.seed)?;
    let mut state: Option<EwcState> = None;
    let mut snapshots = Vec::with_capacity(stages.len());
    for stage in stages {
        let k = stage.spec.stage_index;
        let reg = state.as_ref().map(|s| s as &dyn Regularizer);
        learner.train_epochs(&stage.train, config.epochs_per_stage, stage_shuffle_seed(config.seed, k, 1), reg)?;
        let fisher = fit_fisher(&learner, &stage.train, FISHER_BATCHES, mix_seed(config.seed, 0xF15_0000 + k as u64))?;
        state = Some(EwcState::new(learner.params.clone(), fisher, lambda)?);
        snapshots.push(learner.clone());
    }
    Ok(snapshots)
}

/// Output of one pool-based run.
#[derive(Clone, Debug)]
pub struct VariantRun {
    pub snapshots: Vec<PoolSnapshot>,
    /// Pool size after each stage.
    pub pool_sizes: Vec<usize>,
    pub pool: ModelPool,
}

pub fn run_variant(strategy: Strategy, stages: &[Stage], config: &LearnerConfig) -> Result<VariantRun> {
    run_pool(ModelPool::new(config.clone(), strategy)?, stages)
}

/// Feeds every stage to an already configured pool.
pub fn run_pool(mut pool: ModelPool, stages: &[Stage]) -> Result<VariantRun> {
    check_stages(stages)?;
    let mut snapshots = Vec::with_capacity(stages.len());
    let mut pool_sizes = Vec::with_capacity(stages.len());
    for stage in stages {
        pool.train_on_stage(&stage.train, stage.spec.stage_index)?;
        snapshots.push(pool.snapshot());
        pool_sizes.push(pool.len());
    }
    Ok(VariantRun {
        snapshots,
        pool_sizes,
        pool,
    })
}

/// Mean Dice of a segmenter over a test set.
pub fn mean_dice(model: &dyn Segmenter, test: &[Sample]) -> Result<f64> {
    let scores = test
        .iter()
        .map(|s| dice(&model.segment(&s.image)?, &s.mask))
        .collect::<Result<Vec<f64>>>()?;
    if scores.is_empty() {
        return Err(OdexError::EmptyInput("test set"));
    }
    Ok(mean(&scores))
}

/// `matrix[i][j]`: Dice on stage `j`'s test set of a fresh learner trained
/// only on stage `i`.
pub fn static_per_task(stages: &[Stage], config: &LearnerConfig) -> Result<Vec<Vec<f64>>> {
    static_per_task_models(stages, config)?
        .iter()
        .map(|learner| stages.iter().map(|t| mean_dice(learner, &t.test)).collect())
        .collect()
}

/// One fresh learner per stage, each trained only on that stage.
pub fn static_per_task_models(stages: &[Stage], config: &LearnerConfig) -> Result<Vec<Learner>> {
    check_stages(stages)?;
    stages
        .iter()
        .map(|stage| {
            let mut learner = Learner::new(config, config.seed)?;
            learner.train_stage(&stage.train, stage_shuffle_seed(config.seed, stage.spec.stage_index, 1))?;
            Ok(learner)
        })
        .collect()
}
