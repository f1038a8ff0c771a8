//! Synthetic rail scenes for demos and tests.
//!
//! Each scene is a 64x48 frame: sky, a vegetation band, terrain with a
//! trackbed trapezoid carrying two rails, a dark rail vehicle, a car and a
//! pedestrian. Weather changes the per-category palette.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hash::mix;
use crate::pipeline::Prototype;
use crate::registry::CategoryRegistry;
use crate::render::{render, RenderParams};
use crate::scene::{extract_instances, image_path, mask_path, SceneImage, SemanticMask, DEFAULT_MIN_AREA};
use crate::style::{StyleAssignment, StyleVector};

pub const WIDTH: u32 = 64;
pub const HEIGHT: u32 = 48;

const SKY: u8 = 10;
const VEGETATION: u8 = 8;
const TERRAIN: u8 = 9;
const TRACKBED: u8 = 15;
const RAIL: u8 = 12;
const ON_RAIL: u8 = 16;
const CAR: u8 = 13;
const HUMAN: u8 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weather {
    Sunny,
    Cloudy,
    Night,
    Snow,
}

impl Weather {
    pub const ALL: [Weather; 4] = [Weather::Sunny, Weather::Cloudy, Weather::Night, Weather::Snow];

    pub fn name(self) -> &'static str {
        match self {
            Weather::Sunny => "sunny",
            Weather::Cloudy => "cloudy",
            Weather::Night => "night",
            Weather::Snow => "snow",
        }
    }
}

/// Mean color and per-channel std of `category` under `weather`.
pub fn palette(category: u8, weather: Weather) -> ([f64; 3], f64) {
    use Weather::*;
    let mean = match (category, weather) {
        (SKY, Sunny) => [0.45, 0.65, 0.95],
        (SKY, Cloudy) => [0.70, 0.72, 0.75],
        (SKY, Night) => [0.05, 0.05, 0.12],
        (SKY, Snow) => [0.90, 0.90, 0.92],
        (VEGETATION, Night) => [0.03, 0.08, 0.03],
        (VEGETATION, Snow) => [0.85, 0.88, 0.85],
        (VEGETATION, _) => [0.20, 0.50, 0.15],
        (TERRAIN, Night) => [0.08, 0.07, 0.05],
        (TERRAIN, Snow) => [0.93, 0.93, 0.95],
        (TERRAIN, _) => [0.55, 0.45, 0.30],
        (TRACKBED, Night) => [0.07, 0.07, 0.07],
        (TRACKBED, Snow) => [0.80, 0.80, 0.82],
        (TRACKBED, _) => [0.50, 0.50, 0.50],
        (RAIL, Night) => [0.15, 0.15, 0.16],
        (RAIL, Snow) => [0.60, 0.60, 0.62],
        (RAIL, _) => [0.78, 0.74, 0.70],
        (ON_RAIL, Night) => [0.03, 0.03, 0.06],
        (ON_RAIL, Snow) => [0.35, 0.30, 0.40],
        (ON_RAIL, _) => [0.12, 0.10, 0.20],
        (CAR, Night) => [0.10, 0.02, 0.02],
        (CAR, Snow) => [0.85, 0.60, 0.60],
        (CAR, _) => [0.80, 0.10, 0.10],
        (HUMAN, Night) => [0.10, 0.08, 0.06],
        (HUMAN, Snow) => [0.70, 0.60, 0.50],
        (_, _) => [0.90, 0.70, 0.50],
    };
    let std = if weather == Night { 0.02 } else { 0.03 };
    (mean, std)
}

/// Categories the fixture scenes contain.
pub fn categories() -> [u8; 8] {
    [VEGETATION, TERRAIN, SKY, HUMAN, RAIL, CAR, TRACKBED, ON_RAIL]
}

/// Label layout of one fixture scene; `seed` jitters object positions.
pub fn rail_mask(seed: u64) -> SemanticMask {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 1]));
    let (w, h) = (WIDTH as i32, HEIGHT as i32);
    let horizon = 14 + rng.random_range(0..4);
    let band = horizon + 6;
    let center = 32 + rng.random_range(-3..=3);
    let train_top = band - 4 + rng.random_range(0..3);
    let car_x = 3 + rng.random_range(0..4);
    let car_y = 32 + rng.random_range(0..6);
    let human_x = 52 + rng.random_range(0..5);
    let human_y = 28 + rng.random_range(0..6);

    let mut labels = vec![0u8; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let label = if y < horizon {
                SKY
            } else if y < band {
                VEGETATION
            } else {
                let t = f64::from(y - band) / f64::from(h - 1 - band);
                let half = 4.0 + 12.0 * t;
                let dx = f64::from(x - center);
                let rail = half * 0.55;
                if (dx.abs() - rail).abs() <= 1.5 {
                    RAIL
                } else if dx.abs() <= half {
                    TRACKBED
                } else {
                    TERRAIN
                }
            };
            labels[(y * w + x) as usize] = label;
        }
    }
    let mut fill = |x0: i32, y0: i32, x1: i32, y1: i32, label: u8| {
        for y in y0.max(0)..y1.min(h) {
            for x in x0.max(0)..x1.min(w) {
                labels[(y * w + x) as usize] = label;
            }
        }
    };
    fill(center - 6, train_top, center + 6, train_top + 12, ON_RAIL);
    fill(car_x, car_y, car_x + 11, car_y + 7, CAR);
    fill(human_x, human_y, human_x + 4, human_y + 9, HUMAN);
    SemanticMask::new(WIDTH, HEIGHT, labels).expect("fixture mask is well formed")
}

/// Renders the fixture scene `seed` under `weather`.
///
/// Per-region colors are jittered by up to 0.02 per channel.
pub fn rail_scene(seed: u64, weather: Weather) -> (SceneImage, SemanticMask) {
    let mask = rail_mask(seed);
    let regions = extract_instances(&mask, 255, DEFAULT_MIN_AREA);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 2]));
    let styles = StyleAssignment(
        regions
            .iter()
            .map(|r| {
                let (mut mean, std) = palette(r.category_id, weather);
                for m in &mut mean {
                    *m = (*m + rng.random_range(-0.02..=0.02)).clamp(0.0, 1.0);
                }
                (r.region_id, StyleVector::from_mean_std(mean, [std; 3]))
            })
            .collect(),
    );
    let image = render(&mask, &regions, &styles, &RenderParams::new(mix(&[seed, 3])))
        .expect("every fixture region is styled");
    (image, mask)
}

pub fn write_scene(root: &Path, id: &str, image: &SceneImage, mask: &SemanticMask) -> Result<()> {
    for (path, bytes) in [
        (image_path(root, id), image.to_png()),
        (mask_path(root, id), mask.to_png()),
    ] {
        let dir = path.parent().expect("scene paths have a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// One prototype per sky concept, plus "snow" for every fixture category.
pub fn prototypes(registry: &CategoryRegistry) -> Vec<Prototype> {
    let proto = |cat: u8, w: Weather| {
        let (mean, std) = palette(cat, w);
        Prototype {
            category: registry.name(cat).to_string(),
            concept: w.name().to_string(),
            style: StyleVector::from_mean_std(mean, [std; 3]),
        }
    };
    let mut out: Vec<Prototype> = Weather::ALL.iter().map(|&w| proto(SKY, w)).collect();
    out.extend(categories().into_iter().filter(|&c| c != SKY).map(|c| proto(c, Weather::Snow)));
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoLayout {
    pub root: PathBuf,
    pub style_root: PathBuf,
    pub test_root: PathBuf,
    pub prototypes: PathBuf,
    pub config: PathBuf,
}

/// Writes a style dataset (`per_weather` scenes per weather), a daytime test
/// set of `test_scenes` scenes, concept prototypes and a config file.
pub fn write_demo(root: &Path, test_scenes: usize, per_weather: usize) -> Result<DemoLayout> {
    let style_root = root.join("style");
    let test_root = root.join("test");
    let mut seed = 1000;
    for w in Weather::ALL {
        for i in 0..per_weather {
            let (img, mask) = rail_scene(seed, w);
            write_scene(&style_root, &format!("{}_{:02}", w.name(), i + 1), &img, &mask)?;
            seed += 1;
        }
    }
    for i in 0..test_scenes {
        let (img, mask) = rail_scene(i as u64 + 1, Weather::Sunny);
        write_scene(&test_root, &format!("scene_{:02}", i + 1), &img, &mask)?;
    }
    let registry = CategoryRegistry::railsem19();
    let prototypes = root.join("prototypes.json");
    crate::json::write_atomic(
        &prototypes,
        crate::json::to_pretty_string(&self::prototypes(&registry))?.as_bytes(),
    )?;
    let config = root.join("oddforge.json");
    let text = serde_json::json!({
        "dataset_root": "test",
        "style_dataset_root": "style",
        "store": "store",
        "prototypes": "prototypes.json",
        "seeds": {"cluster": 7, "render": 11},
        "k": 4,
        "focus": "rail-track",
    });
    crate::json::write_atomic(&config, crate::json::to_pretty_string(&text)?.as_bytes())?;
    Ok(DemoLayout {
        root: root.to_path_buf(),
        style_root,
        test_root,
        prototypes,
        config,
    })
}
