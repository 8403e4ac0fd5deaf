//! Tiny 2-D segmentation network trained with hand-written gradients.
//!
//! Architecture (fixed): `conv3x3 -> BN1 -> ReLU -> conv3x3 -> BN2 -> ReLU ->
//! 1x1 head -> sigmoid`. The output of the first batch-normalization layer is
//! the feature map the shift detector works on.

mod loss;
pub(crate) mod ops;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{OdexError, Result};
use crate::sample::{Image, Mask, Sample};
use crate::metrics::dice;

pub use loss::{dice_bce_loss, LossWithGrad};
use ops::{BnBatch, Geometry, BN_EPS, BN_MOMENTUM};

/// Which BN1 quantity is pooled into a [`FeatureVector`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureTap {
    /// Running-statistics normalized response, before `γ` and `β`.
    Normalized,
    /// Full layer output, after the affine transform.
    Affine,
}

impl FeatureTap {
    pub fn name(self) -> &'static str {
        match self {
            FeatureTap::Normalized => "normalized",
            FeatureTap::Affine => "affine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "normalized" => Ok(FeatureTap::Normalized),
            "affine" => Ok(FeatureTap::Affine),
            other => Err(OdexError::InvalidConfig(format!("unknown feature tap {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnerConfig {
    pub channels: usize,
    pub kernel_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub dice_smoothing: f64,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub feature_tap: FeatureTap,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            kernel_size: 3,
            learning_rate: 0.01,
            momentum: 0.99,
            weight_decay: 3e-5,
            epochs_per_stage: 20,
            batch_size: 8,
            dice_smoothing: 1.0,
            height: 32,
            width: 32,
            seed: 0,
            feature_tap: FeatureTap::Normalized,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(OdexError::InvalidConfig(msg.to_string()));
        if self.channels == 0 {
            return bad("channels must be at least 1");
        }
        if self.kernel_size != 3 {
            return bad("only 3x3 kernels are supported");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.height < 3 || self.width < 3 {
            return bad("images must be at least 3x3");
        }
        if !(self.dice_smoothing >= 0.0) {
            return bad("dice_smoothing must be nonnegative");
        }
        Ok(())
    }
}

pub const PARAM_NAMES: [&str; 10] = [
    "conv1.weight",
    "conv1.bias",
    "bn1.gamma",
    "bn1.beta",
    "conv2.weight",
    "conv2.bias",
    "bn2.gamma",
    "bn2.beta",
    "head.weight",
    "head.bias",
];

/// Every trainable tensor of the network, in [`PARAM_NAMES`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub bn1_gamma: Vec<f64>,
    pub bn1_beta: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub bn2_gamma: Vec<f64>,
    pub bn2_beta: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl Params {
    pub fn zeros(channels: usize) -> Self {
        let c = channels;
        Self {
            conv1_w: vec![0.0; c * 9],
            conv1_b: vec![0.0; c],
            bn1_gamma: vec![0.0; c],
            bn1_beta: vec![0.0; c],
            conv2_w: vec![0.0; c * c * 9],
            conv2_b: vec![0.0; c],
            bn2_gamma: vec![0.0; c],
            bn2_beta: vec![0.0; c],
            head_w: vec![0.0; c],
            head_b: vec![0.0; 1],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 10] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.bn1_gamma,
            &self.bn1_beta,
            &self.conv2_w,
            &self.conv2_b,
            &self.bn2_gamma,
            &self.bn2_beta,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 10] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.bn1_gamma,
            &mut self.bn1_beta,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.bn2_gamma,
            &mut self.bn2_beta,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn copy_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(OdexError::DimensionMismatch {
                expected: self.len(),
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        for (name, t) in PARAM_NAMES.iter().zip(self.tensors()) {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(OdexError::NonFiniteGradient { tensor: name });
            }
        }
        Ok(())
    }
}

/// Exponential moving averages of one batch-norm layer's statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    fn update(&mut self, batch: &BnBatch) {
        // Unbiased variance feeds the running estimate.
        let unbias = batch.count as f64 / (batch.count as f64 - 1.0).max(1.0);
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - BN_MOMENTUM) * self.mean[c] + BN_MOMENTUM * batch.mean[c];
            self.var[c] = (1.0 - BN_MOMENTUM) * self.var[c] + BN_MOMENTUM * batch.var[c] * unbias;
        }
    }

    fn inv_std(&self) -> Vec<f64> {
        self.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect()
    }
}

/// Spatially mean-pooled BN1 response of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in the batch-norm layers.
    Train,
    /// Stored running statistics.
    Eval,
}

/// Statistics a training-mode forward pass measured, to be folded into the
/// running averages.
#[derive(Clone, Debug)]
pub struct BatchStats {
    bn1: BnBatch,
    bn2: BnBatch,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// One `H*W` probability grid per image.
    pub probabilities: Vec<Vec<f64>>,
    /// BN1 output before the ReLU, `[image][channel][row][col]`.
    pub bn1_features: Vec<f64>,
    /// BN2 output before the ReLU, same layout.
    pub bn2_features: Vec<f64>,
    pub batch_stats: Option<BatchStats>,
}

/// Intermediate activations kept for the backward pass.
struct Trace {
    geo: Geometry,
    input: Vec<f64>,
    xhat1: Vec<f64>,
    y1: Vec<f64>,
    r1: Vec<f64>,
    xhat2: Vec<f64>,
    y2: Vec<f64>,
    r2: Vec<f64>,
    logits: Vec<f64>,
    bn1: BnBatch,
    bn2: BnBatch,
}

/// Additional differentiable term added to the segmentation loss.
pub trait Regularizer {
    fn penalty(&self, params: &Params) -> f64;
    fn accumulate_gradient(&self, params: &Params, grad: &mut Params);
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    pub train_dice: f64,
    pub grads: Params,
    pub batch_stats: BatchStats,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Loss before the update.
    pub loss: f64,
    /// Hard (p > 0.5) Dice averaged over the batch's images.
    pub train_dice: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub loss: f64,
    pub train_dice: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_train_dice(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_dice)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub config: LearnerConfig,
    pub params: Params,
    pub velocity: Params,
    pub bn1_running: RunningStats,
    pub bn2_running: RunningStats,
}

impl Learner {
    /// Fan-in uniform convolutions, identity batch norms, zero head.
    pub fn new(config: &LearnerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::zeros(c);

        let bound1 = 1.0 / 9f64.sqrt();
        params.conv1_w.iter_mut().for_each(|w| *w = rng.random_range(-bound1..bound1));
        params.conv1_b.iter_mut().for_each(|w| *w = rng.random_range(-bound1..bound1));
        let bound2 = 1.0 / ((9 * c) as f64).sqrt();
        params.conv2_w.iter_mut().for_each(|w| *w = rng.random_range(-bound2..bound2));
        params.conv2_b.iter_mut().for_each(|w| *w = rng.random_range(-bound2..bound2));
        params.bn1_gamma.fill(1.0);
        params.bn2_gamma.fill(1.0);

        Ok(Self {
            config: config.clone(),
            velocity: Params::zeros(c),
            params,
            bn1_running: RunningStats::new(c),
            bn2_running: RunningStats::new(c),
        })
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    /// Drops optimizer momentum.
    pub fn reset_optimizer(&mut self) {
        self.velocity = Params::zeros(self.channels());
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.height != self.config.height || image.width != self.config.width {
            return Err(OdexError::ShapeMismatch {
                expected: format!("{}x{}", self.config.height, self.config.width),
                actual: format!("{}x{}", image.height, image.width),
            });
        }
        Ok(())
    }

    fn stack(&self, images: &[&Image]) -> Result<(Vec<f64>, Geometry)> {
        let mut input = Vec::with_capacity(images.len() * self.config.height * self.config.width);
        for img in images {
            self.check_image(img)?;
            input.extend_from_slice(&img.data);
        }
        Ok((
            input,
            Geometry {
                batch: images.len(),
                height: self.config.height,
                width: self.config.width,
            },
        ))
    }

    fn run(&self, images: &[&Image], mode: Mode) -> Result<Trace> {
        if images.is_empty() {
            return Err(OdexError::EmptyInput("image batch"));
        }
        if mode == Mode::Train && images.len() < 2 {
            return Err(OdexError::BatchTooSmall(images.len()));
        }
        let c = self.channels();
        let p = &self.params;
        let (input, geo) = self.stack(images)?;

        let a1 = ops::conv3x3_forward(&input, 1, &p.conv1_w, &p.conv1_b, c, geo);
        let bn1 = self.bn_stats(&a1, geo, mode, &self.bn1_running);
        let (xhat1, y1) = ops::bn_apply(&a1, c, geo, &bn1.mean, &bn1.inv_std, &p.bn1_gamma, &p.bn1_beta);
        let r1 = ops::relu(&y1);

        let a2 = ops::conv3x3_forward(&r1, c, &p.conv2_w, &p.conv2_b, c, geo);
        let bn2 = self.bn_stats(&a2, geo, mode, &self.bn2_running);
        let (xhat2, y2) = ops::bn_apply(&a2, c, geo, &bn2.mean, &bn2.inv_std, &p.bn2_gamma, &p.bn2_beta);
        let r2 = ops::relu(&y2);

        let logits = ops::head_forward(&r2, c, geo, &p.head_w, p.head_b[0]);
        Ok(Trace {
            geo,
            input,
            xhat1,
            y1,
            r1,
            xhat2,
            y2,
            r2,
            logits,
            bn1,
            bn2,
        })
    }

    fn bn_stats(&self, x: &[f64], geo: Geometry, mode: Mode, running: &RunningStats) -> BnBatch {
        match mode {
            Mode::Train => ops::batch_moments(x, self.channels(), geo),
            Mode::Eval => BnBatch {
                mean: running.mean.clone(),
                var: running.var.clone(),
                inv_std: running.inv_std(),
                count: geo.batch * geo.plane(),
            },
        }
    }

    /// Pure forward pass. In [`Mode::Train`] the measured batch statistics
    /// are returned but not applied; see [`Learner::forward_train`].
    pub fn forward(&self, images: &[&Image], mode: Mode) -> Result<ForwardOutput> {
        let trace = self.run(images, mode)?;
        let plane = trace.geo.plane();
        let probabilities = trace
            .logits
            .chunks(plane)
            .map(|ls| ls.iter().map(|&l| ops::sigmoid(l)).collect())
            .collect();
        let batch_stats = (mode == Mode::Train).then(|| BatchStats {
            bn1: trace.bn1.clone(),
            bn2: trace.bn2.clone(),
        });
        Ok(ForwardOutput {
            probabilities,
            bn1_features: trace.y1,
            bn2_features: trace.y2,
            batch_stats,
        })
    }

    /// Training-mode forward that also folds the batch statistics into the
    /// running averages.
    pub fn forward_train(&mut self, images: &[&Image]) -> Result<ForwardOutput> {
        let out = self.forward(images, Mode::Train)?;
        if let Some(stats) = &out.batch_stats {
            self.apply_batch_stats(stats);
        }
        Ok(out)
    }

    pub fn apply_batch_stats(&mut self, stats: &BatchStats) {
        self.bn1_running.update(&stats.bn1);
        self.bn2_running.update(&stats.bn2);
    }

    /// Evaluation-mode BN1 response of each image, mean-pooled per channel,
    /// taken at the configured [`FeatureTap`].
    pub fn extract_features(&self, images: &[&Image]) -> Result<Vec<FeatureVector>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let c = self.channels();
        let p = &self.params;
        let (input, geo) = self.stack(images)?;
        let a1 = ops::conv3x3_forward(&input, 1, &p.conv1_w, &p.conv1_b, c, geo);
        let inv_std = self.bn1_running.inv_std();
        let plane = geo.plane() as f64;
        Ok(a1
            .chunks(c * geo.plane())
            .map(|img| {
                FeatureVector(
                    img.chunks(geo.plane())
                        .enumerate()
                        .map(|(ch, plane_vals)| {
                            let mean_a = plane_vals.iter().sum::<f64>() / plane;
                            // BN is affine per channel, so pooling commutes with it.
                            let xhat = (mean_a - self.bn1_running.mean[ch]) * inv_std[ch];
                            match self.config.feature_tap {
                                FeatureTap::Normalized => xhat,
                                FeatureTap::Affine => p.bn1_gamma[ch] * xhat + p.bn1_beta[ch],
                            }
                        })
                        .collect(),
                )
            })
            .collect())
    }

    pub fn extract_sample_features(&self, samples: &[Sample]) -> Result<Vec<FeatureVector>> {
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            out.extend(self.extract_features(chunk)?);
        }
        Ok(out)
    }

    pub fn predict_probabilities(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.forward(&[image], Mode::Eval)?.probabilities.remove(0))
    }

    pub fn predict_mask(&self, image: &Image) -> Result<Mask> {
        let probs = self.predict_probabilities(image)?;
        Ok(Mask::from_probabilities(image.height, image.width, &probs))
    }

    /// Batch-mean loss and its full gradient, with batch statistics in the
    /// graph. Does not touch any learner state.
    pub fn gradients(&self, batch: &[&Sample], regularizer: Option<&dyn Regularizer>) -> Result<Gradients> {
        let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
        let t = self.run(&images, Mode::Train)?;
        let geo = t.geo;
        let plane = geo.plane();
        let c = self.channels();
        let n = batch.len() as f64;
        let p = &self.params;

        let mut loss = 0.0;
        let mut train_dice = 0.0;
        let mut d_logits = vec![0.0; t.logits.len()];
        for (k, s) in batch.iter().enumerate() {
            let target = s.mask.as_f64();
            let (lg, probs) =
                loss::dice_bce_from_logits(&t.logits[k * plane..(k + 1) * plane], &target, self.config.dice_smoothing);
            loss += lg.loss / n;
            for (d, g) in d_logits[k * plane..(k + 1) * plane].iter_mut().zip(&lg.gradient) {
                *d = g / n;
            }
            let pred = Mask::from_probabilities(geo.height, geo.width, &probs);
            train_dice += dice(&pred, &s.mask)? / n;
        }

        let mut g = Params::zeros(c);
        let mut d_r2 = ops::head_backward(&t.r2, c, geo, &p.head_w, &d_logits, &mut g.head_w, &mut g.head_b[0]);
        ops::relu_backward(&mut d_r2, &t.y2);
        let d_a2 = ops::bn_backward(&d_r2, &t.xhat2, c, geo, &t.bn2, &p.bn2_gamma, &mut g.bn2_gamma, &mut g.bn2_beta);
        let mut d_r1 = ops::conv3x3_backward(&t.r1, c, &p.conv2_w, c, &d_a2, geo, &mut g.conv2_w, &mut g.conv2_b, true)
            .expect("input gradient requested");
        ops::relu_backward(&mut d_r1, &t.y1);
        let d_a1 = ops::bn_backward(&d_r1, &t.xhat1, c, geo, &t.bn1, &p.bn1_gamma, &mut g.bn1_gamma, &mut g.bn1_beta);
        ops::conv3x3_backward(&t.input, 1, &p.conv1_w, c, &d_a1, geo, &mut g.conv1_w, &mut g.conv1_b, false);

        if let Some(reg) = regularizer {
            loss += reg.penalty(p);
            reg.accumulate_gradient(p, &mut g);
        }
        g.check_finite()?;

        Ok(Gradients {
            loss,
            train_dice,
            grads: g,
            batch_stats: BatchStats { bn1: t.bn1, bn2: t.bn2 },
        })
    }

    /// Batch-mean training loss in training mode, without gradients.
    pub fn batch_loss(&self, batch: &[&Sample], regularizer: Option<&dyn Regularizer>) -> Result<f64> {
        let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
        let t = self.run(&images, Mode::Train)?;
        let plane = t.geo.plane();
        let n = batch.len() as f64;
        let mut loss = 0.0;
        for (k, s) in batch.iter().enumerate() {
            let target = s.mask.as_f64();
            let (lg, _) =
                loss::dice_bce_from_logits(&t.logits[k * plane..(k + 1) * plane], &target, self.config.dice_smoothing);
            loss += lg.loss / n;
        }
        if let Some(reg) = regularizer {
            loss += reg.penalty(&self.params);
        }
        Ok(loss)
    }

    /// One SGD-with-momentum step: `v = m v + g + wd θ; θ -= lr v`.
    pub fn step(&mut self, batch: &[&Sample], regularizer: Option<&dyn Regularizer>) -> Result<StepReport> {
        let grads = self.gradients(batch, regularizer)?;
        let (lr, mom, wd) = (self.config.learning_rate, self.config.momentum, self.config.weight_decay);
        let velocity = self.velocity.tensors_mut();
        let params = self.params.tensors_mut();
        for ((v, theta), g) in velocity.into_iter().zip(params).zip(grads.grads.tensors()) {
            for ((vi, ti), gi) in v.iter_mut().zip(theta.iter_mut()).zip(g) {
                *vi = mom * *vi + gi + wd * *ti;
                *ti -= lr * *vi;
            }
        }
        self.apply_batch_stats(&grads.batch_stats);
        Ok(StepReport {
            loss: grads.loss,
            train_dice: grads.train_dice,
        })
    }

    /// `epochs` passes of seeded shuffled minibatches over `data`.
    pub fn train_epochs(
        &mut self,
        data: &[Sample],
        epochs: usize,
        shuffle_seed: u64,
        regularizer: Option<&dyn Regularizer>,
    ) -> Result<TrainLog> {
        if data.is_empty() {
            return Err(OdexError::EmptyInput("stage data"));
        }
        if epochs == 0 {
            return Ok(TrainLog::default());
        }
        if data.len() < 2 {
            return Err(OdexError::BatchTooSmall(data.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut log = TrainLog::default();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut dice_sum = 0.0;
            for range in batch_ranges(data.len(), self.config.batch_size) {
                let batch: Vec<&Sample> = order[range].iter().map(|&i| &data[i]).collect();
                let report = self.step(&batch, regularizer)?;
                loss_sum += report.loss * batch.len() as f64;
                dice_sum += report.train_dice * batch.len() as f64;
            }
            log.epochs.push(EpochLog {
                loss: loss_sum / data.len() as f64,
                train_dice: dice_sum / data.len() as f64,
            });
        }
        Ok(log)
    }

    /// `epochs_per_stage` epochs over one stage's data.
    pub fn train_stage(&mut self, data: &[Sample], shuffle_seed: u64) -> Result<TrainLog> {
        self.train_epochs(data, self.config.epochs_per_stage, shuffle_seed, None)
    }
}

/// Consecutive minibatch ranges; a trailing singleton joins the previous batch
/// so every batch has at least two images.
pub(crate) fn batch_ranges(len: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + batch_size).min(len);
        out.push(start..end);
        start = end;
    }
    if out.len() > 1 && out.last().map(|r| r.len()) == Some(1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_sample(id: u64, h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Sample {
        let mut img = vec![0.1; h * w];
        let mut mask = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                if d <= r {
                    img[y * w + x] = 0.8;
                    mask[y * w + x] = 1;
                }
            }
        }
        Sample {
            image: Image::new(h, w, img).unwrap(),
            mask: Mask::new(h, w, mask).unwrap(),
            task_label: 1,
            sample_id: id,
        }
    }

    fn small_config() -> LearnerConfig {
        LearnerConfig {
            height: 12,
            width: 12,
            channels: 4,
            ..LearnerConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_follows_the_contract() {
        let cfg = LearnerConfig::default();
        let a = Learner::new(&cfg, 42).unwrap();
        let b = Learner::new(&cfg, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.params.head_w.iter().all(|&w| w == 0.0));
        assert_eq!(a.params.head_b, vec![0.0]);
        assert_eq!(a.params.bn1_gamma, vec![1.0; 8]);
        assert_eq!(a.params.bn1_beta, vec![0.0; 8]);
        assert_eq!(a.bn1_running.var, vec![1.0; 8]);
        assert_eq!(a.params.len(), 72 + 8 + 8 + 8 + 576 + 8 + 8 + 8 + 8 + 1);
        let c = Learner::new(&cfg, 43).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn fresh_learner_predicts_one_half_everywhere() {
        let cfg = small_config();
        let l = Learner::new(&cfg, 1).unwrap();
        let s = blob_sample(0, 12, 12, 5.0, 6.0, 3.0);
        for mode in [Mode::Eval, Mode::Train] {
            let out = l.forward(&[&s.image, &s.image], mode).unwrap();
            assert!(out.probabilities.iter().flatten().all(|&p| p == 0.5));
        }
    }

    #[test]
    fn zero_image_bn1_response_is_bias_only() {
        let cfg = small_config();
        let l = Learner::new(&cfg, 3).unwrap();
        let img = Image::filled(12, 12, 0.0);
        let out = l.forward(&[&img], Mode::Eval).unwrap();
        for ch in 0..4 {
            let expected = l.params.bn1_gamma[ch] * (l.params.conv1_b[ch] - 0.0) / (1.0 + BN_EPS).sqrt()
                + l.params.bn1_beta[ch];
            for px in 0..144 {
                assert!((out.bn1_features[ch * 144 + px] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let l = Learner::new(&small_config(), 0).unwrap();
        let img = Image::filled(10, 12, 0.0);
        assert!(matches!(l.forward(&[&img], Mode::Eval), Err(OdexError::ShapeMismatch { .. })));
    }

    #[test]
    fn train_mode_needs_two_images() {
        let l = Learner::new(&small_config(), 0).unwrap();
        let img = Image::filled(12, 12, 0.0);
        assert!(matches!(l.forward(&[&img], Mode::Train), Err(OdexError::BatchTooSmall(1))));
    }

    #[test]
    fn constant_bn1_output_pools_to_beta() {
        let cfg = LearnerConfig {
            feature_tap: FeatureTap::Affine,
            ..small_config()
        };
        let mut l = Learner::new(&cfg, 9).unwrap();
        l.params.bn1_gamma.fill(0.0);
        l.params.bn1_beta.fill(1.0);
        let s = blob_sample(0, 12, 12, 6.0, 6.0, 4.0);
        let f = l.extract_features(&[&s.image]).unwrap();
        assert_eq!(f[0].0, vec![1.0; 4]);
    }

    #[test]
    fn pooled_features_match_mean_of_bn1_map() {
        let cfg = LearnerConfig {
            feature_tap: FeatureTap::Affine,
            ..small_config()
        };
        let mut l = Learner::new(&cfg, 5).unwrap();
        l.bn1_running.mean = vec![0.1, -0.2, 0.3, 0.0];
        l.bn1_running.var = vec![0.5, 2.0, 1.5, 0.9];
        l.params.bn1_gamma = vec![1.2, 0.7, -0.4, 1.0];
        let s = blob_sample(0, 12, 12, 4.0, 7.0, 3.0);
        let t = blob_sample(1, 12, 12, 8.0, 3.0, 2.0);
        let out = l.forward(&[&s.image, &t.image], Mode::Eval).unwrap();
        let feats = l.extract_features(&[&s.image, &t.image]).unwrap();
        assert_eq!(feats.len(), 2);
        for (k, f) in feats.iter().enumerate() {
            assert_eq!(f.dim(), 4);
            for ch in 0..4 {
                let base = (k * 4 + ch) * 144;
                let mean = out.bn1_features[base..base + 144].iter().sum::<f64>() / 144.0;
                assert!((mean - f.0[ch]).abs() < 1e-12);
            }
        }
        // The normalized tap strips γ and β from the same pooled value.
        l.config.feature_tap = FeatureTap::Normalized;
        let plain = l.extract_features(&[&s.image, &t.image]).unwrap();
        for (f, g) in feats.iter().zip(&plain) {
            for ch in 0..4 {
                let expected = (f.0[ch] - l.params.bn1_beta[ch]) / l.params.bn1_gamma[ch];
                assert!((g.0[ch] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut l = Learner::new(&small_config(), 2).unwrap();
        l.config.learning_rate = 0.0;
        let before = l.params.clone();
        let a = blob_sample(0, 12, 12, 5.0, 5.0, 3.0);
        let b = blob_sample(1, 12, 12, 7.0, 6.0, 2.5);
        let report = l.step(&[&a, &b], None).unwrap();
        assert_eq!(l.params, before);
        assert!(report.loss.is_finite() && report.loss > 0.0);
    }

    #[test]
    fn running_variance_stays_positive() {
        let mut l = Learner::new(&small_config(), 2).unwrap();
        let data: Vec<Sample> = (0..6).map(|i| blob_sample(i, 12, 12, 4.0 + i as f64, 6.0, 2.5)).collect();
        l.train_epochs(&data, 3, 7, None).unwrap();
        assert!(l.bn1_running.var.iter().chain(&l.bn2_running.var).all(|&v| v > 0.0));
    }

    #[test]
    fn eval_forward_does_not_mutate() {
        let l = Learner::new(&small_config(), 4).unwrap();
        let snapshot = l.clone();
        let s = blob_sample(0, 12, 12, 5.0, 5.0, 3.0);
        l.forward(&[&s.image], Mode::Eval).unwrap();
        l.extract_features(&[&s.image]).unwrap();
        assert_eq!(l, snapshot);
    }

    #[test]
    fn batch_ranges_never_leave_a_singleton() {
        assert_eq!(batch_ranges(17, 8), vec![0..8, 8..17]);
        assert_eq!(batch_ranges(16, 8), vec![0..8, 8..16]);
        assert_eq!(batch_ranges(3, 8), vec![0..3]);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let cfg = LearnerConfig {
            epochs_per_stage: 0,
            ..small_config()
        };
        let mut l = Learner::new(&cfg, 1).unwrap();
        let before = l.clone();
        let data: Vec<Sample> = (0..4).map(|i| blob_sample(i, 12, 12, 6.0, 6.0, 3.0)).collect();
        let log = l.train_stage(&data, 0).unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(l, before);
    }
}
