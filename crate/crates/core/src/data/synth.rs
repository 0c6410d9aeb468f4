//! Procedural lesion images for desk-scale experiments.
//!
//! Each image is a skin-toned background with one pigmented blob. The blob
//! outline is a radial function of angle: a base radius, low harmonics at
//! random phases for asymmetry, and higher harmonics for border noise. Pigment
//! is darkest around a point that drifts off-centre with the asymmetry level,
//! and within-lesion color jitter is a mix of blotchy and per-pixel noise.
//!
//! Background noise and color jitter are keyed on the distance to the middle
//! column, so with zero asymmetry and zero border noise the whole image is
//! exactly mirror symmetric. Background and lesion draw from separate RNG
//! streams with fixed draw counts, so changing a profile never changes the
//! background.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::image::RgbImage;
use super::{LabeledDataset, Provenance};
use crate::model::HAM10000_CLASSES;
use crate::{seeded_rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfile {
    pub name: String,
    /// Mirror-asymmetry amplitude, relative to the radius.
    pub asymmetry: f64,
    /// Radial border-noise amplitude, relative to the radius.
    pub border_amplitude: f64,
    /// Base angular frequency of the border noise.
    pub border_frequency: u32,
    /// Standard deviation of within-lesion color jitter.
    pub color_jitter: f64,
    /// Lesion diameter range in pixels.
    pub diameter: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: Vec<ClassProfile>,
    pub seed: u64,
    pub counts: Vec<usize>,
    pub image_size: usize,
}

fn profile(name: &str, asym: f64, border: f64, freq: u32, jitter: f64, d: [f64; 2]) -> ClassProfile {
    ClassProfile {
        name: name.to_string(),
        asymmetry: asym,
        border_amplitude: border,
        border_frequency: freq,
        color_jitter: jitter,
        diameter: d,
    }
}

impl SynthSpec {
    /// Seven profiles named after the HAM10000 classes, built from two
    /// levels of each cue. Three pairs (bcc/nv, vasc/df, mel/akiec) differ
    /// only in symmetry.
    pub fn desk(per_class: usize, image_size: usize, seed: u64) -> Self {
        let s = image_size as f64 / 64.0;
        let small = [14.0 * s, 22.0 * s];
        let large = [26.0 * s, 36.0 * s];
        let [akiec, bcc, bkl, df, mel, nv, vasc] = HAM10000_CLASSES;
        let classes = vec![
            profile(akiec, 0.0, 0.25, 7, 0.10, large),
            profile(bcc, 0.35, 0.0, 7, 0.02, large),
            profile(bkl, 0.0, 0.0, 7, 0.10, large),
            profile(df, 0.0, 0.0, 7, 0.02, small),
            profile(mel, 0.35, 0.25, 7, 0.10, large),
            profile(nv, 0.0, 0.0, 7, 0.02, large),
            profile(vasc, 0.35, 0.0, 7, 0.02, small),
        ];
        Self {
            counts: vec![per_class; classes.len()],
            classes,
            seed,
            image_size,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.classes.is_empty() {
            return bad("no classes".into());
        }
        if self.counts.len() != self.classes.len() {
            return bad(format!(
                "{} counts for {} classes",
                self.counts.len(),
                self.classes.len()
            ));
        }
        if self.image_size < 8 {
            return bad(format!("image size {} is below 8", self.image_size));
        }
        for c in &self.classes {
            let [lo, hi] = c.diameter;
            if !(lo > 0.0 && lo <= hi) {
                return bad(format!("{}: diameter range {lo}..{hi}", c.name));
            }
            if hi > self.image_size as f64 {
                return bad(format!(
                    "{}: lesion diameter {hi} exceeds image size {}",
                    c.name, self.image_size
                ));
            }
            let nonneg = [c.asymmetry, c.border_amplitude, c.color_jitter];
            if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || c.asymmetry >= 1.0 || c.border_amplitude >= 1.0 {
                return bad(format!(
                    "{}: amplitudes must be finite, non-negative and below 1",
                    c.name
                ));
            }
        }
        Ok(())
    }
}

/// One rendered sample and its lesion mask.
#[derive(Clone, Debug)]
pub struct RenderedSample {
    pub image: RgbImage,
    pub mask: Vec<bool>,
}

/// Column index folded about the middle of the image.
fn mirror_col(x: usize, size: usize) -> usize {
    (2 * x).abs_diff(size - 1) / 2
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

const BLOTCH: usize = 4;

pub fn render_sample(spec: &SynthSpec, class: usize, index: usize) -> RenderedSample {
    let p = &spec.classes[class];
    let n = spec.image_size;
    let half = n.div_ceil(2);
    let mut bg_rng = seeded_rng(spec.seed, &[class as u64, index as u64, 0]);
    let mut ls_rng = seeded_rng(spec.seed, &[class as u64, index as u64, 1]);

    // Background: tone, vertical gradient, folded per-pixel noise.
    let tone: Vec<f64> = [0.87, 0.68, 0.58]
        .iter()
        .map(|t| t + bg_rng.random_range(-0.06..0.06))
        .collect();
    let grad = bg_rng.random_range(-0.05..0.05);
    let bg_noise: Vec<f64> = (0..n * half * 3).map(|_| 0.015 * normal(&mut bg_rng)).collect();

    // Lesion geometry; the number of draws never depends on the profile.
    let diameter = ls_rng.random_range(p.diameter[0]..=p.diameter[1]);
    let radius = diameter / 2.0;
    let cx = (n as f64 - 1.0) / 2.0;
    let cy = cx + ls_rng.random_range(-0.08..0.08) * n as f64;
    let asym = p.asymmetry * ls_rng.random_range(0.6..1.4);
    let border = p.border_amplitude * ls_rng.random_range(0.6..1.4);
    let jitter = p.color_jitter * ls_rng.random_range(0.7..1.3);
    let asym_phase: [f64; 3] = std::array::from_fn(|_| ls_rng.random_range(0.0..2.0 * PI));
    let border_phase: [f64; 3] = std::array::from_fn(|_| ls_rng.random_range(0.0..2.0 * PI));
    let pigment_dir = ls_rng.random_range(0.0..2.0 * PI);
    let shift = ls_rng.random_range(-0.05..0.05);
    let base = [0.42 + shift, 0.26 + shift, 0.18 + shift];
    let cells = n.div_ceil(BLOTCH) + 1;
    let hcells = half.div_ceil(BLOTCH) + 1;
    let blotch: Vec<f64> = (0..cells * hcells * 3).map(|_| normal(&mut ls_rng)).collect();
    let fine: Vec<f64> = (0..n * half * 3).map(|_| normal(&mut ls_rng)).collect();

    let f = p.border_frequency as f64;
    let outline = |theta: f64| {
        let a = 0.5 * (2.0 * theta + asym_phase[0]).cos()
            + 0.5 * (3.0 * theta + asym_phase[1]).sin()
            + 0.3 * (theta + asym_phase[2]).cos();
        let b = 0.6 * (f * theta + border_phase[0]).sin()
            + 0.3 * ((f + 1.0) * theta + border_phase[1]).sin()
            + 0.2 * ((2.0 * f + 1.0) * theta + border_phase[2]).sin();
        radius * (1.0 + asym * a + border * b)
    };
    let (px, py) = (
        cx + asym * 2.0 * radius * pigment_dir.cos(),
        cy + asym * 2.0 * radius * pigment_dir.sin(),
    );

    let mut pixels = Vec::with_capacity(n * n * 3);
    let mut mask = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let m = mirror_col(x, n);
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let dist = dx.hypot(dy);
            let theta = dy.atan2(dx);
            let inside = dist <= outline(theta);
            mask.push(inside);
            for c in 0..3 {
                let v = if inside {
                    let dp = (x as f64 - px).hypot(y as f64 - py) / radius;
                    let shade = 0.8 + 0.2 * dp.min(1.0);
                    let bl = blotch[((y / BLOTCH) * hcells + m / BLOTCH) * 3 + c];
                    let fi = fine[(y * half + m) * 3 + c];
                    base[c] * shade + jitter * (0.8 * bl + 0.6 * fi)
                } else {
                    tone[c] + grad * (y as f64 / n as f64 - 0.5) + bg_noise[(y * half + m) * 3 + c]
                };
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    RenderedSample {
        image: RgbImage {
            width: n,
            height: n,
            pixels,
        },
        mask,
    }
}

/// Sample id used for file names; sorts in generation order.
pub fn sample_id(spec: &SynthSpec, class: usize, index: usize) -> String {
    format!("{class:02}_{}_{index:05}", spec.classes[class].name)
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<LabeledDataset<f32>> {
    spec.validate()?;
    let mut ds = LabeledDataset::empty(spec.class_names());
    for (class, &count) in spec.counts.iter().enumerate() {
        for index in 0..count {
            let s = render_sample(spec, class, index);
            ds.push(
                s.image.to_tensor(),
                class,
                Provenance::original(sample_id(spec, class, index)),
            );
        }
    }
    Ok(ds)
}
