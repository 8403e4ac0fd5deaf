//! Intensity and affine transforms used by the "transformed" scenario.

use rand::Rng;

use crate::sample::{Image, Mask};

/// Parameters of one joint image/mask transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformParams {
    /// Lower / upper percentile of the contrast window.
    pub contrast_lo: f64,
    pub contrast_hi: f64,
    pub scale: f64,
    pub rotation_deg: f64,
    /// Translation in pixels, `(dx, dy)`.
    pub translation: (f64, f64),
}

impl TransformParams {
    pub const IDENTITY: Self = Self {
        contrast_lo: 0.0,
        contrast_hi: 1.0,
        scale: 1.0,
        rotation_deg: 0.0,
        translation: (0.0, 0.0),
    };

    /// Draws parameters for magnitude `t` in `[0, 1]`: window `(0.1 t, 1 - 0.1 t)`,
    /// scale in `1 ± 0.2 t`, rotation in `±15 t` degrees, translation in `±5 t` px.
    pub fn sample<R: Rng + ?Sized>(t: f64, rng: &mut R) -> Self {
        let t = t.clamp(0.0, 1.0);
        let mut sym = |half: f64| if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
        let scale = 1.0 + sym(0.2 * t);
        let rotation_deg = sym(15.0 * t);
        let dx = sym(5.0 * t);
        let dy = sym(5.0 * t);
        Self {
            contrast_lo: 0.1 * t,
            contrast_hi: 1.0 - 0.1 * t,
            scale,
            rotation_deg,
            translation: (dx, dy),
        }
    }

    pub fn is_identity_window(&self) -> bool {
        self.contrast_lo == 0.0 && self.contrast_hi == 1.0
    }

    /// Maps an output pixel back to its source coordinate.
    fn inverse_map(&self, height: usize, width: usize) -> impl Fn(f64, f64) -> (f64, f64) {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let theta = self.rotation_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let inv_s = 1.0 / self.scale;
        let (tx, ty) = self.translation;
        move |x: f64, y: f64| {
            let u = x - cx - tx;
            let v = y - cy - ty;
            // Inverse rotation is the transpose.
            let sx = (cos * u + sin * v) * inv_s;
            let sy = (-sin * u + cos * v) * inv_s;
            (sx + cx, sy + cy)
        }
    }
}

/// Inverse-mapped warp about the image center with bilinear interpolation;
/// samples falling outside the source read as 0.
pub fn apply_affine(image: &Image, params: &TransformParams) -> Image {
    let (h, w) = (image.height, image.width);
    let map = params.inverse_map(h, w);
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            image.data[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map(x as f64, y as f64);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let mut v = (1.0 - fx) * (1.0 - fy) * at(x0, y0);
            if fx > 0.0 {
                v += fx * (1.0 - fy) * at(x0 + 1, y0);
            }
            if fy > 0.0 {
                v += (1.0 - fx) * fy * at(x0, y0 + 1);
                if fx > 0.0 {
                    v += fx * fy * at(x0 + 1, y0 + 1);
                }
            }
            out[y * w + x] = v;
        }
    }
    Image {
        height: h,
        width: w,
        data: out,
    }
}

/// Same geometric warp for a mask, nearest-neighbor sampled.
pub fn apply_affine_mask(mask: &Mask, params: &TransformParams) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let map = params.inverse_map(h, w);
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map(x as f64, y as f64);
            let (rx, ry) = (sx.round(), sy.round());
            if rx >= 0.0 && ry >= 0.0 && rx < w as f64 && ry < h as f64 {
                out[y * w + x] = mask.data[ry as usize * w + rx as usize];
            }
        }
    }
    Mask {
        height: h,
        width: w,
        data: out,
    }
}

/// Nearest-rank percentile of already sorted values, `q` in `[0, 1]`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Linearly maps the `lo_pct` / `hi_pct` percentiles to 0 / 1 and clamps.
/// Images whose two percentiles coincide are returned unchanged.
pub fn contrast_stretch(image: &Image, lo_pct: f64, hi_pct: f64) -> Image {
    let mut sorted = image.data.clone();
    sorted.sort_by(f64::total_cmp);
    let lo = nearest_rank(&sorted, lo_pct);
    let hi = nearest_rank(&sorted, hi_pct);
    if hi - lo <= 0.0 {
        return image.clone();
    }
    Image {
        height: image.height,
        width: image.width,
        data: image.data.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Image {
        Image::new(h, w, (0..h * w).map(|i| i as f64 / (h * w - 1) as f64).collect()).unwrap()
    }

    fn gaussian_bump(h: usize, w: usize, sigma: f64) -> Image {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let data = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                0.9 * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = ramp(9, 7);
        assert_eq!(apply_affine(&img, &TransformParams::IDENTITY), img);
        let m = Mask::new(2, 3, vec![1, 0, 1, 0, 0, 1]).unwrap();
        assert_eq!(apply_affine_mask(&m, &TransformParams::IDENTITY), m);
    }

    #[test]
    fn integer_translation_shifts_pixels() {
        let img = ramp(6, 8);
        let p = TransformParams {
            translation: (2.0, -1.0),
            ..TransformParams::IDENTITY
        };
        let out = apply_affine(&img, &p);
        for y in 0..6 {
            for x in 0..8 {
                let (sx, sy) = (x as isize - 2, y as isize + 1);
                let expected = if sx < 0 || sy >= 6 { 0.0 } else { img.get(sy as usize, sx as usize) };
                assert_eq!(out.get(y, x), expected, "({y},{x})");
            }
        }
    }

    #[test]
    fn rotation_round_trip_loses_little() {
        let img = gaussian_bump(32, 32, 5.0);
        let fwd = TransformParams {
            rotation_deg: 10.0,
            ..TransformParams::IDENTITY
        };
        let back = TransformParams {
            rotation_deg: -10.0,
            ..TransformParams::IDENTITY
        };
        let out = apply_affine(&apply_affine(&img, &fwd), &back);
        let mad = img.data.iter().zip(&out.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / img.len() as f64;
        assert!(mad < 0.02, "mean abs diff {mad}");
    }

    #[test]
    fn contrast_window_cases() {
        let img = ramp(4, 4);
        let out = contrast_stretch(&img, 0.0, 1.0);
        for (a, b) in img.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let flat = Image::filled(3, 3, 0.4);
        assert_eq!(contrast_stretch(&flat, 0.1, 0.9), flat);

        let two: Vec<f64> = (0..1024).map(|i| if i % 2 == 0 { 0.2 } else { 0.8 }).collect();
        let img = Image::new(32, 32, two).unwrap();
        let out = contrast_stretch(&img, 0.1, 0.9);
        for (a, b) in img.data.iter().zip(&out.data) {
            let expected = if *a == 0.2 { 0.0 } else { 1.0 };
            assert!((b - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_rank_definition() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.0), 1.0);
        assert_eq!(nearest_rank(&v, 0.1), 1.0);
        assert_eq!(nearest_rank(&v, 0.11), 2.0);
        assert_eq!(nearest_rank(&v, 0.9), 9.0);
        assert_eq!(nearest_rank(&v, 1.0), 10.0);
    }

    #[test]
    fn sampled_parameters_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = TransformParams::sample(1.0, &mut rng);
            assert!(p.rotation_deg.abs() <= 15.0);
            assert!(p.translation.0.abs() <= 5.0 && p.translation.1.abs() <= 5.0);
            assert!((0.8..=1.2).contains(&p.scale));
            assert_eq!((p.contrast_lo, p.contrast_hi), (0.1, 0.9));
        }
        let p = TransformParams::sample(0.0, &mut rng);
        assert_eq!(p, TransformParams::IDENTITY);
    }
}
