//! Random camera sensor effects: exposure, blur, chromatic aberration, noise.
//!
//! Every original image gets exactly one augmented copy whose effect
//! strengths are drawn independently per image from a seeded generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorEffectParams {
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    /// Per-channel (R, G, B) shift in pixels.
    pub ca_translation: [[f64; 2]; 3],
    /// Per-channel magnification about the image centre.
    pub ca_scale: [f64; 3],
    pub gain: f64,
    pub seed: u64,
}

impl SensorEffectParams {
    pub fn identity(seed: u64) -> Self {
        SensorEffectParams {
            noise_sigma: 0.0,
            blur_sigma: 0.0,
            ca_translation: [[0.0; 2]; 3],
            ca_scale: [1.0; 3],
            gain: 1.0,
            seed,
        }
    }
}

/// Closed sampling ranges `[lo, hi]` for each effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EffectRanges {
    pub noise_sigma: (f64, f64),
    pub blur_sigma: (f64, f64),
    pub ca_translation: (f64, f64),
    pub ca_scale: (f64, f64),
    pub gain: (f64, f64),
}

impl Default for EffectRanges {
    fn default() -> Self {
        EffectRanges {
            noise_sigma: (0.0, 0.05),
            blur_sigma: (0.0, 2.0),
            ca_translation: (-2.0, 2.0),
            ca_scale: (0.998, 1.002),
            gain: (0.5, 2.0),
        }
    }
}

impl EffectRanges {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.noise_sigma,
            self.blur_sigma,
            self.ca_translation,
            self.ca_scale,
            self.gain,
        ];
        let ordered = all
            .iter()
            .all(|(lo, hi)| lo.is_finite() && hi.is_finite() && lo <= hi);
        if !ordered
            || self.noise_sigma.0 < 0.0
            || self.blur_sigma.0 < 0.0
            || self.ca_scale.0 <= 0.0
            || self.gain.0 < 0.0
        {
            return Err(Error::InvalidInput(format!(
                "bad augmentation ranges {self:?}"
            )));
        }
        Ok(())
    }

    pub fn contains(&self, p: &SensorEffectParams) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| lo <= v && v <= hi;
        within(p.noise_sigma, self.noise_sigma)
            && within(p.blur_sigma, self.blur_sigma)
            && p.ca_translation
                .iter()
                .flatten()
                .all(|&t| within(t, self.ca_translation))
            && p.ca_scale.iter().all(|&s| within(s, self.ca_scale))
            && within(p.gain, self.gain)
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

pub fn sample_params(seed: u64) -> SensorEffectParams {
    sample_params_in(seed, &EffectRanges::default())
}

pub fn sample_params_in(seed: u64, ranges: &EffectRanges) -> SensorEffectParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_sigma = uniform(&mut rng, ranges.noise_sigma);
    let blur_sigma = uniform(&mut rng, ranges.blur_sigma);
    let mut ca_translation = [[0.0; 2]; 3];
    for t in ca_translation.iter_mut().flatten() {
        *t = uniform(&mut rng, ranges.ca_translation);
    }
    let mut ca_scale = [1.0; 3];
    for s in &mut ca_scale {
        *s = uniform(&mut rng, ranges.ca_scale);
    }
    let gain = uniform(&mut rng, ranges.gain);
    SensorEffectParams {
        noise_sigma,
        blur_sigma,
        ca_translation,
        ca_scale,
        gain,
        seed,
    }
}

/// Applies exposure, Gaussian blur, chromatic aberration and additive noise,
/// in that order. Output values are clamped to `[0, 1]`.
pub fn apply_effects(img: &Image, p: &SensorEffectParams) -> Result<Image> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!(
            "sensor effects need a 3-channel image, got {}",
            img.channels()
        )));
    }
    let mut out = img.clone();
    if p.gain != 1.0 {
        let g = p.gain as f32;
        for v in out.data_mut() {
            *v = (*v * g).clamp(0.0, 1.0);
        }
    }
    if p.blur_sigma > 0.0 {
        out = gaussian_blur(&out, p.blur_sigma);
    }
    if p.ca_translation != [[0.0; 2]; 3] || p.ca_scale != [1.0; 3] {
        out = chromatic_aberration(&out, &p.ca_translation, &p.ca_scale);
    }
    if p.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        rng.set_stream(1);
        for v in out.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = (*v as f64 + p.noise_sigma * z) as f32;
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Normalised Gaussian taps truncated at `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut tmp = img.clone();
    tmp.data_mut()
        .par_chunks_mut(w * ch)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for (k, wk) in kernel.iter().enumerate() {
                        let sx = (x as i64 + k as i64 - r).clamp(0, w as i64 - 1) as usize;
                        acc += wk * img.get(sx, y, c) as f64;
                    }
                    row[x * ch + c] = acc as f32;
                }
            }
        });
    let mut out = tmp.clone();
    out.data_mut()
        .par_chunks_mut(w * ch)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for (k, wk) in kernel.iter().enumerate() {
                        let sy = (y as i64 + k as i64 - r).clamp(0, h as i64 - 1) as usize;
                        acc += wk * tmp.get(x, sy, c) as f64;
                    }
                    row[x * ch + c] = acc as f32;
                }
            }
        });
    out
}

/// Resamples each channel under its own magnification and shift about the
/// image centre: output `q` reads source `centre + (q - centre - t) / s`.
pub fn chromatic_aberration(img: &Image, translation: &[[f64; 2]; 3], scale: &[f64; 3]) -> Image {
    let (w, ch) = (img.width(), img.channels());
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (img.height() as f64 - 1.0) / 2.0;
    let mut out = img.clone();
    out.data_mut()
        .par_chunks_mut(w * ch)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                for c in 0..ch {
                    let sx = cx + (x as f64 - cx - translation[c][0]) / scale[c];
                    let sy = cy + (y as f64 - cy - translation[c][1]) / scale[c];
                    row[x * ch + c] = img.sample_clamped(sx, sy, c);
                }
            }
        });
    out
}
