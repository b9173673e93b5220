//! Per-branch augmentation: one shared geometric draw, independent
//! photometric draws, and colour noise restricted to the background.

use ndarray::{Array2, Array3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Result};
use crate::types::{FrameSample, ImageTensor, SourceFrame};

/// Half-widths of the colour-jitter intervals. Brightness, contrast and
/// saturation factors are drawn from `[1 - r, 1 + r]`, the hue shift (in
/// turns) from `[-r, r]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterRanges {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterRanges {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.1,
        }
    }
}

impl JitterRanges {
    pub const IDENTITY: Self = Self {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
    };

    pub fn sample(&self, rng: &mut impl Rng) -> ColorJitter {
        let mut factor = |r: f64| if r > 0.0 { rng.random_range(1.0 - r..=1.0 + r) } else { 1.0 };
        let brightness = factor(self.brightness);
        let contrast = factor(self.contrast);
        let saturation = factor(self.saturation);
        let hue = if self.hue > 0.0 { rng.random_range(-self.hue..=self.hue) } else { 0.0 };
        ColorJitter {
            brightness,
            contrast,
            saturation,
            hue,
        }
    }
}

/// One concrete colour perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self::IDENTITY
    }
}

fn gray(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

impl ColorJitter {
    pub const IDENTITY: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Brightness, contrast, saturation, then hue; clamped to `[0, 1]` after
    /// every stage.
    pub fn apply(&self, image: &ImageTensor) -> ImageTensor {
        if self.is_identity() {
            return image.clone();
        }
        let mut x = image.data().clone();
        let (_, h, w) = x.dim();
        if self.brightness != 1.0 {
            x.mapv_inplace(|v| (v * self.brightness).clamp(0.0, 1.0));
        }
        if self.contrast != 1.0 {
            let mean = (0..h)
                .flat_map(|y| (0..w).map(move |u| (y, u)))
                .map(|(y, u)| gray(x[[0, y, u]], x[[1, y, u]], x[[2, y, u]]))
                .sum::<f64>()
                / (h * w) as f64;
            x.mapv_inplace(|v| (self.contrast * v + (1.0 - self.contrast) * mean).clamp(0.0, 1.0));
        }
        if self.saturation != 1.0 {
            for y in 0..h {
                for u in 0..w {
                    let g = gray(x[[0, y, u]], x[[1, y, u]], x[[2, y, u]]);
                    for c in 0..3 {
                        x[[c, y, u]] = (self.saturation * x[[c, y, u]] + (1.0 - self.saturation) * g).clamp(0.0, 1.0);
                    }
                }
            }
        }
        if self.hue != 0.0 {
            for y in 0..h {
                for u in 0..w {
                    let (hh, s, v) = rgb_to_hsv(x[[0, y, u]], x[[1, y, u]], x[[2, y, u]]);
                    let rgb = hsv_to_rgb((hh + self.hue).rem_euclid(1.0), s, v);
                    for c in 0..3 {
                        x[[c, y, u]] = rgb[c].clamp(0.0, 1.0);
                    }
                }
            }
        }
        ImageTensor::from_clamped(x).expect("jitter keeps the shape and finiteness")
    }
}

/// Hue in turns `[0, 1)`.
fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Colour noise drawn from `ranges` under `seed`, applied to background
/// pixels only; instance pixels (`mask == true`) are copied bit for bit.
pub fn instance_background_noise(
    image: &ImageTensor,
    instance_mask: &Array2<bool>,
    ranges: &JitterRanges,
    seed: u64,
) -> Result<ImageTensor> {
    let (h, w) = image.shape();
    ensure_shape(&[h, w], instance_mask.shape())?;
    let jitter = ranges.sample(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(mask_blend(image, &jitter.apply(image), instance_mask))
}

fn mask_blend(original: &ImageTensor, noisy: &ImageTensor, keep: &Array2<bool>) -> ImageTensor {
    let mut out: Array3<f64> = noisy.data().clone();
    for c in 0..3 {
        Zip::from(out.index_axis_mut(ndarray::Axis(0), c))
            .and(original.data().index_axis(ndarray::Axis(0), c))
            .and(keep)
            .for_each(|o, &src, &k| {
                if k {
                    *o = src;
                }
            });
    }
    ImageTensor::from_clamped(out).expect("blend of valid images")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Probability that a branch's view receives colour jitter at all.
    pub jitter_prob: f64,
    pub jitter: JitterRanges,
    /// Background-only colour noise on the supervised view.
    pub background_noise: bool,
    pub noise: JitterRanges,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            jitter_prob: 0.5,
            jitter: JitterRanges::default(),
            background_noise: true,
            noise: JitterRanges::default(),
        }
    }
}

impl AugmentConfig {
    /// No flips, no colour changes.
    pub fn disabled() -> Self {
        Self {
            flip_prob: 0.0,
            jitter_prob: 0.0,
            jitter: JitterRanges::IDENTITY,
            background_noise: false,
            noise: JitterRanges::IDENTITY,
        }
    }
}

/// Two photometrically different views of one geometrically augmented
/// sample, plus the geometrically augmented but photometrically clean
/// sample that the losses compare against.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub view_s: FrameSample,
    pub view_u: FrameSample,
    pub clean: FrameSample,
    pub flipped: bool,
}

fn jitter_view(sample: &FrameSample, jitter: &ColorJitter) -> FrameSample {
    if jitter.is_identity() {
        return sample.clone();
    }
    FrameSample {
        target: jitter.apply(&sample.target),
        sources: sample
            .sources
            .iter()
            .map(|s| SourceFrame {
                image: jitter.apply(&s.image),
                pose: s.pose,
            })
            .collect(),
        ..sample.clone()
    }
}

/// Draws one shared horizontal flip and independent colour jitter per
/// branch; the supervised view additionally gets background noise on its
/// target frame when enabled. Targets, poses and masks are never altered
/// photometrically.
pub fn augment_pair(sample: &FrameSample, config: &AugmentConfig, seed: u64) -> AugmentedPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flipped = config.flip_prob > 0.0 && rng.random_bool(config.flip_prob.min(1.0));
    let clean = if flipped { sample.flipped() } else { sample.clone() };
    let draw = |rng: &mut ChaCha8Rng| {
        let on = config.jitter_prob > 0.0 && rng.random_bool(config.jitter_prob.min(1.0));
        let jitter = config.jitter.sample(rng);
        if on {
            jitter
        } else {
            ColorJitter::IDENTITY
        }
    };
    let jitter_s = draw(&mut rng);
    let jitter_u = draw(&mut rng);
    let noise_seed: u64 = rng.random();

    let mut view_s = jitter_view(&clean, &jitter_s);
    if config.background_noise {
        let noise = config.noise.sample(&mut ChaCha8Rng::seed_from_u64(noise_seed));
        if !noise.is_identity() {
            let noisy = noise.apply(&view_s.target);
            view_s.target = mask_blend(&view_s.target, &noisy, &view_s.instance_mask);
        }
    }
    let view_u = jitter_view(&clean, &jitter_u);
    AugmentedPair {
        view_s,
        view_u,
        clean,
        flipped,
    }
}
