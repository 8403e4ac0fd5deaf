//! Synthetic segmentation streams with smooth distribution shifts.
//!
//! Two scenarios are provided:
//! * shifting source: three blob generators whose mixture proportions drift
//!   from pure A to pure C across stages;
//! * transformed: source A under progressively stronger intensity windows
//!   and affine warps.

pub mod io;
mod transform;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{OdexError, Result};
use crate::sample::{Image, Mask, Sample};

pub use io::{read_stage, read_stream, write_stage, write_stream, STREAM_MAGIC, STREAM_VERSION};
pub use transform::{apply_affine, apply_affine_mask, contrast_stretch, nearest_rank, TransformParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SourceId {
    A,
    B,
    C,
}

impl SourceId {
    pub const ALL: [SourceId; 3] = [SourceId::A, SourceId::B, SourceId::C];

    pub fn index(self) -> u32 {
        match self {
            SourceId::A => 1,
            SourceId::B => 2,
            SourceId::C => 3,
        }
    }
}

/// Per-image level drawn uniformly from `mean ± spread`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intensity {
    pub mean: f64,
    pub spread: f64,
}

impl Intensity {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.spread > 0.0 {
            rng.random_range(self.mean - self.spread..=self.mean + self.spread)
        } else {
            self.mean
        }
    }
}

/// Generator of elliptical "structure" blobs on a flat background.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSource {
    pub source_id: SourceId,
    pub foreground: Intensity,
    pub background: Intensity,
    /// Range of both ellipse semi-axes, in pixels.
    pub semi_axis: (f64, f64),
    /// Largest ratio between the long and short semi-axis.
    pub max_eccentricity: f64,
    pub noise_sigma: f64,
    pub height: usize,
    pub width: usize,
}

impl SyntheticSource {
    /// The three reference generators. A is a bright blob on a dark
    /// background, B has lower contrast and larger blobs, C has inverted
    /// polarity (dark blob on a bright background).
    pub fn preset(id: SourceId, height: usize, width: usize) -> Self {
        let s = height.min(width) as f64 / 32.0;
        let (foreground, background, semi_axis) = match id {
            SourceId::A => (
                Intensity { mean: 0.50, spread: 0.05 },
                Intensity { mean: 0.10, spread: 0.05 },
                (3.0 * s, 7.0 * s),
            ),
            SourceId::B => (
                Intensity { mean: 0.45, spread: 0.05 },
                Intensity { mean: 0.15, spread: 0.05 },
                (5.0 * s, 10.0 * s),
            ),
            SourceId::C => (
                Intensity { mean: 0.60, spread: 0.05 },
                Intensity { mean: 0.90, spread: 0.05 },
                (3.0 * s, 7.0 * s),
            ),
        };
        Self {
            source_id: id,
            foreground,
            background,
            semi_axis,
            max_eccentricity: 2.0,
            noise_sigma: 0.03,
            height,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.foreground.mean - self.background.mean).abs() < 0.2 {
            return Err(OdexError::InvalidConfig(format!(
                "source {:?}: foreground/background contrast below 0.2",
                self.source_id
            )));
        }
        let (lo, hi) = self.semi_axis;
        if !(lo >= 1.0 && hi >= lo) {
            return Err(OdexError::InvalidConfig("semi-axis range must satisfy 1 <= lo <= hi".into()));
        }
        if 2.0 * hi + 2.0 >= self.height.min(self.width) as f64 {
            return Err(OdexError::InvalidConfig("blob does not fit in the image".into()));
        }
        Ok(())
    }
}

/// Renders one random blob sample. `task_label` is set to the source index;
/// stream builders relabel it with the stage's task.
pub fn gen_source_sample<R: Rng + ?Sized>(source: &SyntheticSource, rng: &mut R, sample_id: u64) -> Sample {
    let (h, w) = (source.height, source.width);
    let (lo, hi) = source.semi_axis;
    let a = rng.random_range(lo..=hi);
    let b_lo = (a / source.max_eccentricity).max(lo);
    let b_hi = (a * source.max_eccentricity).min(hi).max(b_lo);
    let b = rng.random_range(b_lo..=b_hi);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let margin = a.max(b) + 1.0;
    let cx = rng.random_range(margin..=(w as f64 - 1.0 - margin));
    let cy = rng.random_range(margin..=(h as f64 - 1.0 - margin));
    let fg = source.foreground.draw(rng);
    let bg = source.background.draw(rng);
    let (sin, cos) = angle.sin_cos();

    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            if u * u + v * v <= 1.0 {
                mask[y * w + x] = 1;
            }
        }
    }
    // Both semi-axes are >= 1 so the nearest pixel to the center is inside.
    let (rx, ry) = (cx.round() as usize, cy.round() as usize);
    mask[ry * w + rx] = 1;

    let image: Vec<f64> = mask
        .iter()
        .map(|&m| {
            let base = if m == 1 { fg } else { bg };
            let noise: f64 = if source.noise_sigma > 0.0 {
                source.noise_sigma * Distribution::<f64>::sample(&StandardNormal, rng)
            } else {
                0.0
            };
            (base + noise).clamp(0.0, 1.0)
        })
        .collect();

    Sample {
        image: Image { height: h, width: w, data: image },
        mask: Mask { height: h, width: w, data: mask },
        task_label: source.source_id.index(),
        sample_id,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StageKind {
    /// Proportions of sources A, B, C.
    Mixture([f64; 3]),
    /// Transform magnitude in `[0, 1]`.
    Transformed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    /// 1-based.
    pub stage_index: usize,
    pub kind: StageKind,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub spec: StageSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    ShiftingSource,
    Transformed,
    /// Every stage drawn from source A; used as a no-shift control.
    Stationary,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::ShiftingSource => "shifting_source",
            Scenario::Transformed => "transformed",
            Scenario::Stationary => "stationary",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "shifting_source" | "shifting-source" => Ok(Scenario::ShiftingSource),
            "transformed" => Ok(Scenario::Transformed),
            "stationary" | "no_shift" => Ok(Scenario::Stationary),
            other => Err(OdexError::InvalidConfig(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub scenario: Scenario,
    pub height: usize,
    pub width: usize,
    pub stages: Vec<Stage>,
}

impl Stream {
    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn test_sets(&self) -> Vec<Vec<Sample>> {
        self.stages.iter().map(|s| s.test.clone()).collect()
    }

    pub fn build(scenario: Scenario, n_stages: usize, n_train: usize, n_test: usize, size: usize, seed: u64) -> Result<Self> {
        match scenario {
            Scenario::ShiftingSource => build_shifting_source_stream(n_stages, n_train, n_test, size, seed),
            Scenario::Transformed => build_transformed_stream(n_stages, n_train, n_test, size, seed),
            Scenario::Stationary => {
                let schedule = vec![[1.0, 0.0, 0.0]; n_stages.max(1)];
                let mut s = build_mixture_stream(&schedule, n_train, n_test, size, seed)?;
                s.scenario = Scenario::Stationary;
                Ok(s)
            }
        }
    }
}

/// SplitMix64 finalizer; decorrelates derived seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stage_seed(seed: u64, stage_index: usize) -> u64 {
    mix_seed(seed, stage_index as u64)
}

const TRAIN_SPLIT: u64 = 0;
const TEST_SPLIT: u64 = 1;

fn sample_id(stage_index: usize, split: u64, k: usize) -> u64 {
    ((stage_index as u64) << 32) | (split << 31) | k as u64
}

fn sample_rng(stage_seed: u64, split: u64, k: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(stage_seed, split + 1), k as u64))
}

/// The five anchor proportions of the default A -> B -> C drift.
const ANCHORS: [[f64; 3]; 5] = [
    [1.0, 0.0, 0.0],
    [0.6, 0.4, 0.0],
    [0.2, 0.6, 0.2],
    [0.0, 0.4, 0.6],
    [0.0, 0.0, 1.0],
];

/// Mixture schedule for `n_stages`: stage positions spread evenly over the
/// five anchors with piecewise-linear interpolation (five stages reproduce
/// the anchors exactly).
pub fn default_schedule(n_stages: usize) -> Vec<[f64; 3]> {
    if n_stages <= 1 {
        return vec![ANCHORS[0]];
    }
    (0..n_stages)
        .map(|k| {
            let pos = k as f64 * 4.0 / (n_stages - 1) as f64;
            let i = (pos.floor() as usize).min(3);
            let f = pos - i as f64;
            let mut w = [0.0; 3];
            for s in 0..3 {
                w[s] = (1.0 - f) * ANCHORS[i][s] + f * ANCHORS[i + 1][s];
            }
            let total: f64 = w.iter().sum();
            w.map(|x| x / total)
        })
        .collect()
}

/// Largest-remainder split of `n` samples by `weights`; ties go to the
/// lower source index.
pub fn mixture_counts(weights: &[f64; 3], n: usize) -> Result<[usize; 3]> {
    if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(OdexError::InvalidSchedule(format!("weights {weights:?} must be nonnegative and sum to 1")));
    }
    let exact: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        // Snap values that are integral up to rounding noise.
        *c = if (e - e.round()).abs() < 1e-9 { e.round() as usize } else { e.floor() as usize };
    }
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

fn mixture_split(weights: &[f64; 3], n: usize, stage_index: usize, seed: u64, split: u64, size: usize) -> Result<Vec<Sample>> {
    let counts = mixture_counts(weights, n)?;
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    for (id, &count) in SourceId::ALL.iter().zip(&counts) {
        let source = SyntheticSource::preset(*id, size, size);
        for _ in 0..count {
            let mut rng = sample_rng(seed, split, k);
            let mut s = gen_source_sample(&source, &mut rng, sample_id(stage_index, split, k));
            s.task_label = stage_index as u32;
            out.push(s);
            k += 1;
        }
    }
    Ok(out)
}

/// Stream whose stage `k` mixes sources with `schedule[k]`.
pub fn build_mixture_stream(schedule: &[[f64; 3]], n_train: usize, n_test: usize, size: usize, seed: u64) -> Result<Stream> {
    if schedule.is_empty() {
        return Err(OdexError::InvalidSchedule("empty schedule".into()));
    }
    for id in SourceId::ALL {
        SyntheticSource::preset(id, size, size).validate()?;
    }
    let stages = schedule
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let stage_index = i + 1;
            let sseed = stage_seed(seed, stage_index);
            Ok(Stage {
                spec: StageSpec {
                    stage_index,
                    kind: StageKind::Mixture(*w),
                    n_train,
                    n_test,
                    seed: sseed,
                },
                train: mixture_split(w, n_train, stage_index, sseed, TRAIN_SPLIT, size)?,
                test: mixture_split(w, n_test, stage_index, sseed, TEST_SPLIT, size)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Stream {
        scenario: Scenario::ShiftingSource,
        height: size,
        width: size,
        stages,
    })
}

pub fn build_shifting_source_stream(n_stages: usize, n_train: usize, n_test: usize, size: usize, seed: u64) -> Result<Stream> {
    build_mixture_stream(&default_schedule(n_stages), n_train, n_test, size, seed)
}

fn transformed_sample(source: &SyntheticSource, t: f64, stage_index: usize, seed: u64, split: u64, k: usize) -> Sample {
    let mut rng = sample_rng(seed, split, k);
    let mut s = gen_source_sample(source, &mut rng, sample_id(stage_index, split, k));
    s.task_label = stage_index as u32;
    if t > 0.0 {
        let mut trng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, 0x7472_616e), sample_id(stage_index, split, k)));
        let p = TransformParams::sample(t, &mut trng);
        s.image = contrast_stretch(&apply_affine(&s.image, &p), p.contrast_lo, p.contrast_hi);
        s.mask = apply_affine_mask(&s.mask, &p);
    }
    s
}

/// Source A with transform magnitude `t = (k - 1) / (n - 1)` at stage `k`.
/// Stage 1 (`t = 0`) is untransformed.
pub fn build_transformed_stream(n_stages: usize, n_train: usize, n_test: usize, size: usize, seed: u64) -> Result<Stream> {
    if n_stages == 0 {
        return Err(OdexError::InvalidSchedule("need at least one stage".into()));
    }
    let source = SyntheticSource::preset(SourceId::A, size, size);
    source.validate()?;
    let stages = (1..=n_stages)
        .map(|stage_index| {
            let t = if n_stages == 1 { 0.0 } else { (stage_index - 1) as f64 / (n_stages - 1) as f64 };
            let sseed = stage_seed(seed, stage_index);
            Stage {
                spec: StageSpec {
                    stage_index,
                    kind: StageKind::Transformed(t),
                    n_train,
                    n_test,
                    seed: sseed,
                },
                train: (0..n_train).map(|k| transformed_sample(&source, t, stage_index, sseed, TRAIN_SPLIT, k)).collect(),
                test: (0..n_test).map(|k| transformed_sample(&source, t, stage_index, sseed, TEST_SPLIT, k)).collect(),
            }
        })
        .collect();
    Ok(Stream {
        scenario: Scenario::Transformed,
        height: size,
        width: size,
        stages,
    })
}
