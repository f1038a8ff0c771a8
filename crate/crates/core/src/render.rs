//! Deterministic scene renderer.
//!
//! Synthesizes an image from a semantic mask and one style per region. A
//! pixel `p` of region `r` with channel means `m` and standard deviations `s`
//! becomes `clamp(m_c + s_c * sqrt(3) * eta_c(p))`, where `eta` is uniform on
//! `[-1, 1)` and derived from `(noise_seed, region_id, x, y, c)` by 64-bit
//! integer mixing. Uniform noise on `[-1, 1)` has variance 1/3, so the
//! `sqrt(3)` factor makes `s_c` the rendered standard deviation. Ignore
//! pixels are black.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{mix, unit_interval};
use crate::registry::CategoryRegistry;
use crate::scene::{InstanceRegion, Scene, SceneImage, SemanticMask};
use crate::style::{interpolate_assignment, StyleAssignment};

const SQRT_3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    #[default]
    HashUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderParams {
    pub noise_seed: u64,
    #[serde(default)]
    pub noise_kind: NoiseKind,
}

impl RenderParams {
    pub fn new(noise_seed: u64) -> Self {
        Self {
            noise_seed,
            noise_kind: NoiseKind::HashUniform,
        }
    }
}

/// Noise value in `[-1, 1)` for one channel of one pixel.
pub fn noise(seed: u64, region_id: u32, x: u32, y: u32, channel: u8) -> f64 {
    let h = mix(&[
        seed,
        u64::from(region_id),
        u64::from(x),
        u64::from(y),
        u64::from(channel),
    ]);
    2.0 * unit_interval(h) - 1.0
}

pub fn render(
    mask: &SemanticMask,
    regions: &[InstanceRegion],
    styles: &StyleAssignment,
    params: &RenderParams,
) -> Result<SceneImage> {
    let (w, h) = mask.size();
    let n = w as usize * h as usize;
    let mut jobs = Vec::with_capacity(regions.len());
    for r in regions {
        let style = styles.get(r.region_id).ok_or(Error::UncoveredRegion(r.region_id))?;
        if style.dim() < 6 {
            return Err(Error::StyleDimension {
                expected: 6,
                found: style.dim(),
            });
        }
        if let Some(&p) = r.pixels.iter().find(|&&p| p as usize >= n) {
            return Err(Error::RenderInput(format!(
                "region {} pixel {p} lies outside the {w}x{h} mask",
                r.region_id
            )));
        }
        jobs.push((r, style.mean(), style.std()));
    }

    let painted: Vec<Vec<(u32, [f64; 3])>> = jobs
        .par_iter()
        .map(|(r, mean, std)| {
            r.pixels
                .iter()
                .map(|&p| {
                    let (x, y) = (p % w, p / w);
                    let mut rgb = [0.0; 3];
                    for c in 0..3 {
                        let eta = noise(params.noise_seed, r.region_id, x, y, c as u8);
                        rgb[c] = (mean[c] + std[c] * SQRT_3 * eta).clamp(0.0, 1.0);
                    }
                    (p, rgb)
                })
                .collect()
        })
        .collect();

    let mut samples = vec![0.0; n * 3];
    for (p, rgb) in painted.into_iter().flatten() {
        let i = p as usize * 3;
        samples[i..i + 3].copy_from_slice(&rgb);
    }
    SceneImage::new(w, h, samples)
}

/// `lambda_i = i / (steps - 1)` for `i = 0..steps`.
pub fn transition_lambdas(steps: usize) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(Error::TooFewSteps(steps));
    }
    let last = (steps - 1) as f64;
    Ok((0..steps).map(|i| i as f64 / last).collect())
}

/// Frames along the straight line from style `a` to style `b`.
pub fn render_transition(
    scene: &Scene,
    a: &StyleAssignment,
    b: &StyleAssignment,
    steps: usize,
    params: &RenderParams,
) -> Result<Vec<SceneImage>> {
    transition_lambdas(steps)?
        .into_iter()
        .map(|lambda| {
            let styles = interpolate_assignment(a, b, lambda)?;
            render(&scene.mask, &scene.regions, &styles, params)
        })
        .collect()
}

/// Colors `mask` with the registry display colors and blends it over `image`:
/// `(1 - alpha) * image + alpha * color`. Ignore pixels keep the image.
pub fn overlay(
    image: &SceneImage,
    mask: &SemanticMask,
    registry: &CategoryRegistry,
    alpha: f64,
) -> Result<SceneImage> {
    if image.size() != mask.size() {
        return Err(Error::MaskDimensions(image.size(), mask.size()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::RenderInput(format!("alpha {alpha} is outside [0, 1]")));
    }
    let mut samples = image.samples().to_vec();
    for (i, &label) in mask.labels().iter().enumerate() {
        if let Some(cat) = registry.get(label) {
            for c in 0..3 {
                let v = &mut samples[i * 3 + c];
                *v = (1.0 - alpha) * *v + alpha * f64::from(cat.color[c]) / 255.0;
            }
        }
    }
    SceneImage::new(image.width(), image.height(), samples)
}

/// File name of a transition frame: `<scene>_<from>_<to>_<i>.png`.
pub fn transition_frame_name(scene_id: &str, from: &str, to: &str, index: usize) -> String {
    format!("{scene_id}_{from}_{to}_{index}.png")
}
