//! Independent reference implementations shared by the integration tests
//! and the acceptance runner.
#![allow(dead_code)]

use odex::learner::{Learner, LearnerConfig, Mode};
use odex::{FeatureVector, Image, Mask, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random correlated point cloud: `x = A g + b` with Gaussian `g`.
pub fn correlated_features(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<FeatureVector> {
    let a: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
    (0..n)
        .map(|_| {
            let g: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
            FeatureVector(
                (0..dim)
                    .map(|i| b[i] + (0..dim).map(|j| a[i * dim + j] * g[j]).sum::<f64>())
                    .collect(),
            )
        })
        .collect()
}

/// Box-Muller draw.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Mean, then divide-by-N covariance from a second pass.
pub fn two_pass_moments(features: &[FeatureVector]) -> (Vec<f64>, Vec<f64>) {
    let n = features.len();
    let c = features[0].0.len();
    let mut mu = vec![0.0; c];
    for i in 0..c {
        mu[i] = features.iter().map(|f| f.0[i]).sum::<f64>() / n as f64;
    }
    let mut sigma = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            sigma[i * c + j] = features.iter().map(|f| (f.0[i] - mu[i]) * (f.0[j] - mu[j])).sum::<f64>() / n as f64;
        }
    }
    (mu, sigma)
}

/// Gauss-Jordan elimination with partial pivoting on a row-major matrix.
pub fn gauss_jordan_inverse(m: &[f64], n: usize) -> Vec<f64> {
    let w = 2 * n;
    let mut aug = vec![0.0; n * w];
    for i in 0..n {
        aug[i * w..i * w + n].copy_from_slice(&m[i * n..(i + 1) * n]);
        aug[i * w + n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| aug[a * w + col].abs().total_cmp(&aug[b * w + col].abs()))
            .unwrap();
        if pivot != col {
            for k in 0..w {
                aug.swap(col * w + k, pivot * w + k);
            }
        }
        let p = aug[col * w + col];
        for k in 0..w {
            aug[col * w + k] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = aug[r * w + col];
                if f != 0.0 {
                    for k in 0..w {
                        aug[r * w + k] -= f * aug[col * w + k];
                    }
                }
            }
        }
    }
    (0..n).flat_map(|i| aug[i * w + n..(i + 1) * w].to_vec()).collect()
}

/// `sqrt(d^T (sigma + eps I)^{-1} d)` through the Gauss-Jordan inverse.
pub fn mahalanobis_oracle(mu: &[f64], sigma: &[f64], eps: f64, z: &[f64]) -> f64 {
    let c = mu.len();
    let mut reg = sigma.to_vec();
    for i in 0..c {
        reg[i * c + i] += eps;
    }
    let inv = gauss_jordan_inverse(&reg, c);
    let d: Vec<f64> = z.iter().zip(mu).map(|(a, b)| a - b).collect();
    let mut q = 0.0;
    for i in 0..c {
        for j in 0..c {
            q += d[i] * inv[i * c + j] * d[j];
        }
    }
    q.sqrt()
}

/// `max |a - b| / max |b|`.
pub fn normwise_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Noisy image with a random rectangle as the foreground.
pub fn random_sample(rng: &mut ChaCha8Rng, h: usize, w: usize, id: u64) -> Sample {
    let (y0, x0) = (rng.random_range(0..h / 2), rng.random_range(0..w / 2));
    let (y1, x1) = (rng.random_range(y0 + 2..=h), rng.random_range(x0 + 2..=w));
    let mut mask = vec![0u8; h * w];
    let mut img = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let fg = y >= y0 && y < y1 && x >= x0 && x < x1;
            mask[y * w + x] = fg as u8;
            img[y * w + x] = if fg { 0.7 } else { 0.2 } + rng.random_range(-0.15..0.15);
        }
    }
    Sample {
        image: Image::new(h, w, img).unwrap(),
        mask: Mask::new(h, w, mask).unwrap(),
        task_label: 0,
        sample_id: id,
    }
}

/// Learner with every parameter drawn at random so no gradient is
/// structurally zero.
pub fn random_learner(config: &LearnerConfig, rng: &mut ChaCha8Rng) -> Learner {
    let mut l = Learner::new(config, rng.random()).unwrap();
    for (k, t) in l.params.tensors_mut().into_iter().enumerate() {
        let is_gamma = k == 2 || k == 6;
        for v in t.iter_mut() {
            *v = if is_gamma { rng.random_range(0.5..1.5) } else { rng.random_range(-0.5..0.5) };
        }
    }
    l
}

/// Sign pattern of both ReLU inputs in training mode.
fn relu_pattern(learner: &Learner, batch: &[&Sample]) -> Vec<bool> {
    let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
    let out = learner.forward(&images, Mode::Train).unwrap();
    out.bn1_features.iter().chain(&out.bn2_features).map(|&v| v > 0.0).collect()
}

/// Largest relative error between analytic and central-difference
/// gradients over every parameter, for one random learner and a random
/// 2-sample batch. The denominator is floored at `1e-6`, below which
/// central differences are dominated by round-off.
///
/// Returns `None` when some `θ ± h` stencil moves a ReLU input across zero:
/// the loss is then not differentiable on that interval and the difference
/// quotient is no estimate of the derivative.
pub fn gradient_check(seed: u64, size: usize, h: f64) -> Option<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = LearnerConfig {
        height: size,
        width: size,
        ..LearnerConfig::default()
    };
    let mut learner = random_learner(&config, &mut rng);
    let samples = [random_sample(&mut rng, size, size, 0), random_sample(&mut rng, size, size, 1)];
    let batch: Vec<&Sample> = samples.iter().collect();
    let analytic = learner.gradients(&batch, None).unwrap().grads.to_flat();
    let pattern = relu_pattern(&learner, &batch);
    let base = learner.params.to_flat();
    let names = odex::learner::PARAM_NAMES;
    let lens: Vec<usize> = learner.params.tensors().iter().map(|t| t.len()).collect();
    let mut worst = (0.0, String::new());
    let mut flat = base.clone();
    for (idx, &a) in analytic.iter().enumerate() {
        let mut eval = |x: f64| {
            flat[idx] = x;
            learner.params.copy_from_flat(&flat).unwrap();
            (learner.batch_loss(&batch, None).unwrap(), relu_pattern(&learner, &batch) == pattern)
        };
        let (up, up_smooth) = eval(base[idx] + h);
        let (down, down_smooth) = eval(base[idx] - h);
        flat[idx] = base[idx];
        if !(up_smooth && down_smooth) {
            return None;
        }
        let numeric = (up - down) / (2.0 * h);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if err > worst.0 {
            let (mut t, mut off) = (0, idx);
            while off >= lens[t] {
                off -= lens[t];
                t += 1;
            }
            worst = (err, format!("{}[{off}] analytic {a:e} numeric {numeric:e}", names[t]));
        }
    }
    Some(worst)
}

/// Runs [`gradient_check`] on consecutive seeds from `first_seed` until
/// `count` batches are differentiable over every stencil. Returns the worst
/// error and the number of batches drawn.
pub fn gradient_suite(first_seed: u64, count: usize, size: usize, h: f64) -> ((f64, String), u64) {
    let mut worst = (0.0, String::new());
    let (mut seed, mut done) = (first_seed, 0);
    while done < count {
        if let Some(r) = gradient_check(seed, size, h) {
            done += 1;
            if r.0 > worst.0 {
                worst = r;
            }
        }
        seed += 1;
    }
    (worst, seed - first_seed)
}
