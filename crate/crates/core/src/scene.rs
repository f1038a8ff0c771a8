//! Scenes, semantic masks and instance regions.
//!
//! Dataset layout on disk:
//!
//! ```text
//! <root>/images/<id>.png   8-bit RGB
//! <root>/masks/<id>.png    8-bit gray, value = category id, 255 = ignore
//! ```

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, GrayImage, ImageFormat, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::CategoryRegistry;

/// Fragments below this many pixels are folded into a per-category residual region.
pub const DEFAULT_MIN_AREA: usize = 64;

/// RGB image with samples in `[0, 1]`, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    width: u32,
    height: u32,
    samples: Vec<f64>,
}

impl SceneImage {
    pub fn new(width: u32, height: u32, samples: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage("zero-sized image".into()));
        }
        let expected = width as usize * height as usize * 3;
        if samples.len() != expected {
            return Err(Error::InvalidImage(format!(
                "expected {expected} samples, found {}",
                samples.len()
            )));
        }
        if let Some(pos) = samples
            .iter()
            .position(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            return Err(Error::InvalidImage(format!(
                "sample {} at index {pos} is outside [0, 1]",
                samples[pos]
            )));
        }
        Ok(Self {
            width,
            height,
            samples,
        })
    }

    /// Uniformly colored image.
    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Result<Self> {
        let n = width as usize * height as usize;
        let samples = rgb.iter().copied().cycle().take(n * 3).collect();
        Self::new(width, height, samples)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn pixel(&self, index: usize) -> [f64; 3] {
        let s = &self.samples[index * 3..index * 3 + 3];
        [s[0], s[1], s[2]]
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let samples = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Self {
            width: img.width(),
            height: img.height(),
            samples,
        }
    }

    /// Quantizes to 8 bits: clamp to `[0, 1]`, scale by 255, round half away from zero.
    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.samples.iter().map(|&v| quantize(v)).collect();
        RgbImage::from_raw(self.width, self.height, raw).expect("buffer length matches")
    }

    pub fn to_png(&self) -> Vec<u8> {
        png_bytes(&DynamicImage::ImageRgb8(self.to_rgb8()))
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn png_bytes(img: &DynamicImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encoding does not fail");
    out.into_inner()
}

/// Per-pixel category ids (or the registry's ignore id), row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMask {
    width: u32,
    height: u32,
    labels: Vec<u8>,
}

impl SemanticMask {
    /// Builds a mask without checking labels against a registry.
    pub fn new(width: u32, height: u32, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage("zero-sized mask".into()));
        }
        if labels.len() != width as usize * height as usize {
            return Err(Error::InvalidImage(format!(
                "mask of {width}x{height} needs {} labels, found {}",
                width as usize * height as usize,
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    /// Returns the first pixel whose label is neither registered nor ignore.
    pub fn first_unregistered(&self, registry: &CategoryRegistry) -> Option<(u32, u32, u8)> {
        self.labels
            .iter()
            .position(|&l| l != registry.ignore_id() && !registry.contains(l))
            .map(|i| {
                let (x, y) = self.coords(i);
                (x, y, self.labels[i])
            })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    pub fn coords(&self, index: usize) -> (u32, u32) {
        let w = self.width as usize;
        ((index % w) as u32, (index / w) as u32)
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_raw(self.width, self.height, self.labels.clone())
            .expect("buffer length matches")
    }

    pub fn to_png(&self) -> Vec<u8> {
        png_bytes(&DynamicImage::ImageLuma8(self.to_gray8()))
    }

    /// Decodes an 8-bit grayscale PNG and validates it against `registry`.
    pub fn from_png(bytes: &[u8], path: &Path, registry: &CategoryRegistry) -> Result<Self> {
        let img = decode(bytes, path)?;
        if img.color() != ColorType::L8 {
            return Err(Error::PixelFormat {
                path: path.to_path_buf(),
                expected: "8-bit single-channel mask",
                found: format!("{:?}", img.color()),
            });
        }
        let gray = img.into_luma8();
        let mask = Self::new(gray.width(), gray.height(), gray.into_raw())?;
        if let Some((x, y, label)) = mask.first_unregistered(registry) {
            return Err(Error::UnregisteredLabel {
                path: path.to_path_buf(),
                x,
                y,
                label,
            });
        }
        Ok(mask)
    }
}

/// One style-editable region: a 4-connected component of a single category,
/// or the residual union of that category's undersized fragments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRegion {
    pub region_id: u32,
    pub category_id: u8,
    /// Linear pixel indices, ascending.
    pub pixels: Vec<u32>,
    pub residual: bool,
}

impl InstanceRegion {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn coords(&self, width: u32) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.pixels.iter().map(move |&i| (i % width, i / width))
    }
}

/// Splits the non-ignore pixels of `mask` into instance regions.
///
/// Components smaller than `min_area` are merged into one residual region per
/// category. Region ids follow `(category_id, first pixel in row-major order)`.
pub fn extract_instances(
    mask: &SemanticMask,
    ignore_id: u8,
    min_area: usize,
) -> Vec<InstanceRegion> {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let labels = &mask.labels;
    let mut seen = vec![false; labels.len()];
    let mut kept: Vec<(u8, Vec<u32>, bool)> = Vec::new();
    let mut residual: BTreeMap<u8, Vec<u32>> = BTreeMap::new();
    let mut queue = VecDeque::new();

    for start in 0..labels.len() {
        let label = labels[start];
        if seen[start] || label == ignore_id {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut component = Vec::new();
        while let Some(i) = queue.pop_front() {
            component.push(i as u32);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if !seen[j] && labels[j] == label {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        component.sort_unstable();
        if component.len() >= min_area {
            kept.push((label, component, false));
        } else {
            residual.entry(label).or_default().extend(component);
        }
    }
    for (label, mut pixels) in residual {
        pixels.sort_unstable();
        kept.push((label, pixels, true));
    }
    kept.sort_by_key(|(label, pixels, _)| (*label, pixels[0]));
    kept.into_iter()
        .enumerate()
        .map(|(i, (category_id, pixels, residual))| InstanceRegion {
            region_id: i as u32,
            category_id,
            pixels,
            residual,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub scene_id: String,
    pub image: SceneImage,
    pub mask: SemanticMask,
    pub regions: Vec<InstanceRegion>,
    pub source_path: PathBuf,
}

impl Scene {
    pub fn from_parts(
        scene_id: impl Into<String>,
        image: SceneImage,
        mask: SemanticMask,
        registry: &CategoryRegistry,
        min_area: usize,
    ) -> Result<Self> {
        if image.size() != mask.size() {
            return Err(Error::MaskDimensions(image.size(), mask.size()));
        }
        if let Some((x, y, label)) = mask.first_unregistered(registry) {
            return Err(Error::UnregisteredLabel {
                path: PathBuf::new(),
                x,
                y,
                label,
            });
        }
        let regions = extract_instances(&mask, registry.ignore_id(), min_area);
        Ok(Self {
            scene_id: scene_id.into(),
            image,
            mask,
            regions,
            source_path: PathBuf::new(),
        })
    }

    pub fn region(&self, id: u32) -> Option<&InstanceRegion> {
        self.regions.iter().find(|r| r.region_id == id)
    }

    pub fn categories(&self) -> BTreeSet<u8> {
        self.regions.iter().map(|r| r.category_id).collect()
    }
}

fn decode(bytes: &[u8], path: &Path) -> Result<DynamicImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_rgb_png(path: &Path) -> Result<SceneImage> {
    let img = decode(&read(path)?, path)?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::PixelFormat {
            path: path.to_path_buf(),
            expected: "8-bit RGB image",
            found: format!("{:?}", img.color()),
        });
    }
    Ok(SceneImage::from_rgb8(&img.into_rgb8()))
}

pub fn read_mask_png(path: &Path, registry: &CategoryRegistry) -> Result<SemanticMask> {
    SemanticMask::from_png(&read(path)?, path, registry)
}

pub fn load_scene(
    image_path: &Path,
    mask_path: &Path,
    registry: &CategoryRegistry,
    min_area: usize,
) -> Result<Scene> {
    let image = read_rgb_png(image_path)?;
    let mask = read_mask_png(mask_path, registry)?;
    if image.size() != mask.size() {
        return Err(Error::SceneDimensions {
            image: image_path.to_path_buf(),
            mask: mask_path.to_path_buf(),
            image_size: image.size(),
            mask_size: mask.size(),
        });
    }
    let scene_id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let regions = extract_instances(&mask, registry.ignore_id(), min_area);
    Ok(Scene {
        scene_id,
        image,
        mask,
        regions,
        source_path: image_path.to_path_buf(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagnosticKind {
    MissingMask,
    MissingImage,
    SizeMismatch,
    BadLabel,
    Unreadable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub scene_id: String,
    pub kind: DiagnosticKind,
    pub message: String,
}

fn png_ids(dir: &Path) -> Result<BTreeSet<String>> {
    if !dir.is_dir() {
        return Ok(BTreeSet::new());
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem() {
                ids.insert(stem.to_string_lossy().into_owned());
            }
        }
    }
    Ok(ids)
}

/// Scene ids with both an image and a mask, sorted.
pub fn dataset_ids(root: &Path) -> Result<Vec<String>> {
    let images = png_ids(&root.join("images"))?;
    let masks = png_ids(&root.join("masks"))?;
    Ok(images.intersection(&masks).cloned().collect())
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}

pub fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}.png"))
}

/// Checks every image/mask pair under `root`; an empty list means the dataset is clean.
pub fn validate_dataset(root: &Path, registry: &CategoryRegistry) -> Result<Vec<Diagnostic>> {
    std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let images = png_ids(&root.join("images"))?;
    let masks = png_ids(&root.join("masks"))?;
    let mut out = Vec::new();
    for id in images.difference(&masks) {
        out.push(Diagnostic {
            scene_id: id.clone(),
            kind: DiagnosticKind::MissingMask,
            message: format!("missing mask for {id}"),
        });
    }
    for id in masks.difference(&images) {
        out.push(Diagnostic {
            scene_id: id.clone(),
            kind: DiagnosticKind::MissingImage,
            message: format!("missing image for {id}"),
        });
    }
    let pairs: Vec<&String> = images.intersection(&masks).collect();
    let checked: Vec<Option<Diagnostic>> = pairs
        .par_iter()
        .map(|id| {
            let err = load_scene(&image_path(root, id), &mask_path(root, id), registry, 1).err()?;
            let kind = match err {
                Error::SceneDimensions { .. } => DiagnosticKind::SizeMismatch,
                Error::UnregisteredLabel { .. } => DiagnosticKind::BadLabel,
                _ => DiagnosticKind::Unreadable,
            };
            Some(Diagnostic {
                scene_id: (*id).clone(),
                kind,
                message: err.to_string(),
            })
        })
        .collect();
    out.extend(checked.into_iter().flatten());
    out.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    Ok(out)
}

/// Loads every complete pair under `root`, sorted by id.
pub fn load_dataset(root: &Path, registry: &CategoryRegistry, min_area: usize) -> Result<Vec<Scene>> {
    let ids = dataset_ids(root)?;
    ids.par_iter()
        .map(|id| load_scene(&image_path(root, id), &mask_path(root, id), registry, min_area))
        .collect()
}
