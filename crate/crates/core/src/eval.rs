//! Segmentation scoring and the model-under-test slot.
//!
//! Scores come from a ground-truth × prediction confusion matrix. Ignore
//! pixels in the ground truth are not scored. Reports carry three means:
//! the macro mean over present categories (headline), the macro mean over
//! all registry categories (absent ones count as 0), and the
//! ground-truth-frequency-weighted mean.

use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::error::{AdapterError, Error, Result};
use crate::hash::sha256_hex;
use crate::registry::CategoryRegistry;
use crate::scene::{Scene, SceneImage, SemanticMask};

pub const DEFAULT_ADAPTER_TIMEOUT_SECS: u64 = 300;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: u8, pred: u8) -> u64 {
        self.counts[usize::from(gt) * self.classes + usize::from(pred)]
    }

    pub fn add(&mut self, gt: u8, pred: u8, n: u64) {
        self.counts[usize::from(gt) * self.classes + usize::from(pred)] += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.classes, other.classes, "confusion matrices differ in size");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn true_positives(&self, c: u8) -> u64 {
        self.get(c, c)
    }

    /// Ground-truth pixels of `c`.
    pub fn row_sum(&self, c: u8) -> u64 {
        let r = usize::from(c) * self.classes;
        self.counts[r..r + self.classes].iter().sum()
    }

    /// Pixels predicted as `c`.
    pub fn column_sum(&self, c: u8) -> u64 {
        (0..self.classes)
            .map(|g| self.counts[g * self.classes + usize::from(c)])
            .sum()
    }
}

pub fn confusion_accumulate(
    gt: &SemanticMask,
    pred: &SemanticMask,
    registry: &CategoryRegistry,
) -> Result<ConfusionMatrix> {
    if gt.size() != pred.size() {
        return Err(Error::MaskDimensions(gt.size(), pred.size()));
    }
    let mut m = ConfusionMatrix::new(registry.len());
    for (i, (&g, &p)) in gt.labels().iter().zip(pred.labels()).enumerate() {
        if g == registry.ignore_id() {
            continue;
        }
        if !registry.contains(g) {
            let (x, y) = gt.coords(i);
            return Err(Error::UnregisteredLabel {
                path: PathBuf::from("<ground truth>"),
                x,
                y,
                label: g,
            });
        }
        if !registry.contains(p) {
            let (x, y) = pred.coords(i);
            return Err(Error::InvalidPrediction { x, y, label: p });
        }
        m.add(g, p, 1);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category_id: u8,
    pub intersection: u64,
    pub union: u64,
    pub gt_pixels: u64,
    /// `None` when the category appears in neither ground truth nor prediction.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub categories: Vec<CategoryScore>,
    /// Macro mean over present categories; `None` when nothing was scored.
    pub mean_iou: Option<f64>,
    pub mean_iou_all: Option<f64>,
    pub frequency_weighted_iou: Option<f64>,
    pub scored_pixels: u64,
}

impl IouReport {
    pub fn iou(&self, category: u8) -> Option<f64> {
        self.categories.get(usize::from(category)).and_then(|c| c.iou)
    }

    pub fn present(&self) -> impl Iterator<Item = &CategoryScore> {
        self.categories.iter().filter(|c| c.iou.is_some())
    }
}

pub fn iou_from_matrix(m: &ConfusionMatrix) -> IouReport {
    let scored = m.total();
    let categories: Vec<CategoryScore> = (0..m.classes())
        .map(|c| {
            let c = c as u8;
            let tp = m.true_positives(c);
            let gt_pixels = m.row_sum(c);
            let union = gt_pixels + m.column_sum(c) - tp;
            CategoryScore {
                category_id: c,
                intersection: tp,
                union,
                gt_pixels,
                iou: (union > 0).then(|| tp as f64 / union as f64),
            }
        })
        .collect();
    let present: Vec<f64> = categories.iter().filter_map(|c| c.iou).collect();
    let (mean_iou, mean_iou_all, frequency_weighted_iou) = if scored == 0 || present.is_empty() {
        (None, None, None)
    } else {
        let sum: f64 = present.iter().sum();
        let fw = categories
            .iter()
            .map(|c| c.gt_pixels as f64 / scored as f64 * c.iou.unwrap_or(0.0))
            .sum();
        (
            Some(sum / present.len() as f64),
            Some(sum / m.classes() as f64),
            Some(fw),
        )
    };
    IouReport {
        categories,
        mean_iou,
        mean_iou_all,
        frequency_weighted_iou,
        scored_pixels: scored,
    }
}

/// Nearest-centroid color classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    /// Indexed by category id; `None` for categories never seen while fitting.
    pub centroids: Vec<Option<[f64; 3]>>,
}

impl BaselineModel {
    pub fn fitted(&self) -> impl Iterator<Item = (u8, [f64; 3])> + '_ {
        self.centroids
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|c| (i as u8, c)))
    }

    /// Fitted category with the nearest centroid; ties go to the lowest id.
    pub fn classify(&self, rgb: [f64; 3]) -> Option<u8> {
        let mut best: Option<(u8, f64)> = None;
        for (id, c) in self.fitted() {
            let d: f64 = (0..3).map(|k| (rgb[k] - c[k]) * (rgb[k] - c[k])).sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((id, d));
            }
        }
        best.map(|(id, _)| id)
    }

    pub fn predict(&self, image: &SceneImage) -> Result<SemanticMask> {
        if self.fitted().next().is_none() {
            return Err(Error::UnfittedModel);
        }
        let n = image.width() as usize * image.height() as usize;
        let labels = (0..n)
            .map(|i| self.classify(image.pixel(i)).expect("model has fitted categories"))
            .collect();
        SemanticMask::new(image.width(), image.height(), labels)
    }
}

/// Per-category mean color over every labeled pixel of `scenes`.
pub fn fit_baseline(scenes: &[Scene], registry: &CategoryRegistry) -> BaselineModel {
    let mut sums = vec![[0.0f64; 3]; registry.len()];
    let mut counts = vec![0u64; registry.len()];
    for scene in scenes {
        for (i, &label) in scene.mask.labels().iter().enumerate() {
            if !registry.contains(label) {
                continue;
            }
            let px = scene.image.pixel(i);
            let s = &mut sums[usize::from(label)];
            for c in 0..3 {
                s[c] += px[c];
            }
            counts[usize::from(label)] += 1;
        }
    }
    let centroids = sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.map(|v| v / n as f64)))
        .collect();
    BaselineModel { centroids }
}

/// Configuration of the model under test.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelAdapter {
    #[default]
    BuiltinBaseline,
    /// Invoked as `<command...> --input <dir> --output <dir>`.
    ExternalCommand {
        command: Vec<String>,
        #[serde(default)]
        working_dir: Option<PathBuf>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_timeout() -> u64 {
    DEFAULT_ADAPTER_TIMEOUT_SECS
}

/// Anything that turns images into masks.
pub trait Segmenter: Send + Sync {
    /// Predicts one mask per `(id, image)` input, in input order.
    fn predict_batch(&self, inputs: &[(String, &SceneImage)]) -> Vec<Result<SemanticMask, AdapterError>>;

    /// Stable identity for caching predictions.
    fn fingerprint(&self) -> String;
}

impl Segmenter for BaselineModel {
    fn predict_batch(&self, inputs: &[(String, &SceneImage)]) -> Vec<Result<SemanticMask, AdapterError>> {
        inputs
            .iter()
            .map(|(_, img)| self.predict(img).map_err(|e| AdapterError::Io(e.to_string())))
            .collect()
    }

    fn fingerprint(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("model serializes").as_bytes())
    }
}

/// External segmentation process speaking the directory-in/directory-out protocol.
#[derive(Debug, Clone)]
pub struct ExternalSegmenter {
    pub command: Vec<String>,
    pub working_dir: Option<PathBuf>,
    pub timeout: Duration,
    pub registry: CategoryRegistry,
}

impl ExternalSegmenter {
    fn display(&self) -> String {
        self.command.join(" ")
    }

    fn run(&self, inputs: &[(String, &SceneImage)]) -> std::result::Result<tempfile::TempDir, AdapterError> {
        let io_err = |e: std::io::Error| AdapterError::Io(e.to_string());
        let program = self.command.first().ok_or_else(|| AdapterError::Spawn {
            command: String::new(),
            message: "empty command".into(),
        })?;
        let tmp = tempfile::tempdir().map_err(io_err)?;
        let input = tmp.path().join("input");
        let output = tmp.path().join("output");
        std::fs::create_dir_all(&input).map_err(io_err)?;
        std::fs::create_dir_all(&output).map_err(io_err)?;
        for (id, img) in inputs {
            std::fs::write(input.join(format!("{id}.png")), img.to_png()).map_err(io_err)?;
        }

        let mut cmd = Command::new(program);
        cmd.args(&self.command[1..])
            .arg("--input")
            .arg(&input)
            .arg("--output")
            .arg(&output)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped());
        if let Some(dir) = &self.working_dir {
            cmd.current_dir(dir);
        }
        let mut child = cmd.spawn().map_err(|e| AdapterError::Spawn {
            command: self.display(),
            message: e.to_string(),
        })?;
        let mut stderr_pipe = child.stderr.take().expect("stderr is piped");
        let reader = std::thread::spawn(move || {
            let mut buf = String::new();
            let _ = stderr_pipe.read_to_string(&mut buf);
            buf
        });
        let status = match child.wait_timeout(self.timeout).map_err(io_err)? {
            Some(status) => status,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(AdapterError::Timeout {
                    command: self.display(),
                    seconds: self.timeout.as_secs(),
                });
            }
        };
        let stderr = reader.join().unwrap_or_default();
        if !status.success() {
            let mut stderr = stderr.trim().to_string();
            if stderr.len() > 2000 {
                let mut cut = 2000;
                while !stderr.is_char_boundary(cut) {
                    cut -= 1;
                }
                stderr.truncate(cut);
            }
            return Err(AdapterError::Exit {
                command: self.display(),
                code: status.code(),
                stderr,
            });
        }
        Ok(tmp)
    }
}

impl Segmenter for ExternalSegmenter {
    fn predict_batch(&self, inputs: &[(String, &SceneImage)]) -> Vec<Result<SemanticMask, AdapterError>> {
        if inputs.is_empty() {
            return Vec::new();
        }
        let dir = match self.run(inputs) {
            Ok(dir) => dir,
            Err(e) => return inputs.iter().map(|_| Err(e.clone())).collect(),
        };
        let output = dir.path().join("output");
        inputs
            .iter()
            .map(|(id, img)| {
                let fail = |message: String| AdapterError::Output {
                    command: self.display(),
                    id: id.clone(),
                    message,
                };
                let path = output.join(format!("{id}.png"));
                let bytes = std::fs::read(&path).map_err(|e| fail(e.to_string()))?;
                let mask = SemanticMask::from_png(&bytes, &path, &self.registry)
                    .map_err(|e| fail(e.to_string()))?;
                if mask.size() != img.size() {
                    return Err(fail(format!(
                        "mask is {:?}, image is {:?}",
                        mask.size(),
                        img.size()
                    )));
                }
                Ok(mask)
            })
            .collect()
    }

    fn fingerprint(&self) -> String {
        sha256_hex(format!("external\0{}\0{:?}", self.command.join("\0"), self.working_dir).as_bytes())
    }
}

impl ModelAdapter {
    /// Builds the segmenter; the builtin kind needs a fitted model.
    pub fn segmenter(
        &self,
        model: Option<&BaselineModel>,
        registry: &CategoryRegistry,
    ) -> Result<Box<dyn Segmenter>> {
        match self {
            ModelAdapter::BuiltinBaseline => {
                let model = model.ok_or(Error::UnfittedModel)?;
                Ok(Box::new(model.clone()))
            }
            ModelAdapter::ExternalCommand {
                command,
                working_dir,
                timeout_secs,
            } => {
                if command.is_empty() {
                    return Err(Error::Config("external adapter command is empty".into()));
                }
                Ok(Box::new(ExternalSegmenter {
                    command: command.clone(),
                    working_dir: working_dir.clone(),
                    timeout: Duration::from_secs(*timeout_secs),
                    registry: registry.clone(),
                }))
            }
        }
    }
}

/// Single-image prediction through an adapter.
pub fn predict(
    adapter: &ModelAdapter,
    model: Option<&BaselineModel>,
    image: &SceneImage,
    registry: &CategoryRegistry,
) -> Result<SemanticMask> {
    let seg = adapter.segmenter(model, registry)?;
    let mut out = seg.predict_batch(&[("input".to_string(), image)]);
    Ok(out.remove(0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg() -> CategoryRegistry {
        CategoryRegistry::default()
    }

    fn mask(labels: &[u8]) -> SemanticMask {
        SemanticMask::new(labels.len() as u32, 1, labels.to_vec()).unwrap()
    }

    #[test]
    fn diagonal_counts() {
        let m = confusion_accumulate(&mask(&[2; 4]), &mask(&[2; 4]), &reg()).unwrap();
        assert_eq!(m.get(2, 2), 4);
        assert_eq!(m.total(), 4);
        let r = iou_from_matrix(&m);
        assert_eq!(r.iou(2), Some(1.0));
        assert_eq!(r.mean_iou, Some(1.0));
        assert_eq!(r.present().count(), 1);
    }

    #[test]
    fn small_hand_counted_case() {
        let m = confusion_accumulate(&mask(&[0, 0, 1, 1]), &mask(&[0, 1, 1, 1]), &reg()).unwrap();
        assert_eq!((m.get(0, 0), m.get(0, 1), m.get(1, 1), m.get(1, 0)), (1, 1, 2, 0));
        let r = iou_from_matrix(&m);
        assert_eq!(r.iou(0), Some(0.5));
        assert_eq!(r.iou(1), Some(2.0 / 3.0));
        assert!((r.mean_iou.unwrap() - 7.0 / 12.0).abs() < 1e-15);
        assert!((r.mean_iou_all.unwrap() - (0.5 + 2.0 / 3.0) / 19.0).abs() < 1e-15);
        assert!((r.frequency_weighted_iou.unwrap() - (0.5 * 0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn disjoint_prediction_scores_zero() {
        let m = confusion_accumulate(&mask(&[0; 3]), &mask(&[1; 3]), &reg()).unwrap();
        let r = iou_from_matrix(&m);
        assert_eq!((r.iou(0), r.iou(1), r.mean_iou), (Some(0.0), Some(0.0), Some(0.0)));
    }

    #[test]
    fn all_ignore_scores_nothing() {
        let m = confusion_accumulate(&mask(&[255; 3]), &mask(&[4; 3]), &reg()).unwrap();
        assert_eq!(m.total(), 0);
        let r = iou_from_matrix(&m);
        assert_eq!(r.scored_pixels, 0);
        assert!(r.mean_iou.is_none());
        assert!(r.categories.iter().all(|c| c.iou.is_none()));
    }

    #[test]
    fn ignore_in_gt_discards_prediction() {
        let m = confusion_accumulate(&mask(&[255, 3]), &mask(&[200, 3]), &reg()).unwrap();
        assert_eq!(m.total(), 1);
    }

    #[test]
    fn invalid_inputs() {
        let r = reg();
        assert!(matches!(
            confusion_accumulate(&mask(&[0, 0]), &mask(&[0]), &r),
            Err(Error::MaskDimensions(..))
        ));
        assert!(matches!(
            confusion_accumulate(&mask(&[0, 0]), &mask(&[0, 19]), &r),
            Err(Error::InvalidPrediction { x: 1, label: 19, .. })
        ));
        assert!(matches!(
            confusion_accumulate(&mask(&[0]), &mask(&[255]), &r),
            Err(Error::InvalidPrediction { .. })
        ));
    }

    fn scene(labels: &[u8], colors: &[[f64; 3]]) -> Scene {
        let samples = colors.iter().flatten().copied().collect();
        Scene::from_parts(
            "s",
            SceneImage::new(labels.len() as u32, 1, samples).unwrap(),
            mask(labels),
            &reg(),
            1,
        )
        .unwrap()
    }

    #[test]
    fn baseline_centroids() {
        let model = fit_baseline(&[scene(&[0, 0], &[[0.1; 3], [0.1; 3]])], &reg());
        let c = model.centroids[0].unwrap();
        assert!(c.iter().all(|v| (v - 0.1).abs() < 1e-15));

        let model = fit_baseline(&[scene(&[0, 0, 255], &[[0.0; 3], [1.0; 3], [0.7; 3]])], &reg());
        assert_eq!(model.centroids[0], Some([0.5; 3]));
        assert_eq!(model.fitted().count(), 1);
        assert!(model.centroids[5].is_none());
        assert_eq!(model.classify([0.9, 0.0, 0.1]), Some(0));
    }

    #[test]
    fn baseline_tie_goes_to_lower_id() {
        let mut centroids = vec![None; 19];
        centroids[4] = Some([0.25; 3]);
        centroids[9] = Some([0.75; 3]);
        let model = BaselineModel { centroids };
        assert_eq!(model.classify([0.5; 3]), Some(4));
        assert_eq!(model.classify([0.51; 3]), Some(9));
    }

    #[test]
    fn baseline_recovers_flat_render() {
        let colors = [[0.1, 0.2, 0.3], [0.8, 0.8, 0.1], [0.3, 0.9, 0.4]];
        let labels = [0u8, 0, 7, 7, 12, 12, 12];
        let s = scene(
            &labels,
            &labels.map(|l| colors[[0, 7, 12].iter().position(|&x| x == l).unwrap()]),
        );
        let model = fit_baseline(std::slice::from_ref(&s), &reg());
        let pred = predict(&ModelAdapter::BuiltinBaseline, Some(&model), &s.image, &reg()).unwrap();
        assert_eq!(pred, s.mask);
    }

    #[test]
    fn unfitted_model_cannot_predict() {
        let model = BaselineModel { centroids: vec![None; 19] };
        let img = SceneImage::filled(1, 1, [0.0; 3]).unwrap();
        assert!(matches!(model.predict(&img), Err(Error::UnfittedModel)));
        assert!(predict(&ModelAdapter::BuiltinBaseline, None, &img, &reg()).is_err());
    }

    #[test]
    fn adapter_json_shape() {
        let a: ModelAdapter =
            serde_json::from_str(r#"{"kind":"external-command","command":["python3","seg.py"]}"#).unwrap();
        assert_eq!(
            a,
            ModelAdapter::ExternalCommand {
                command: vec!["python3".into(), "seg.py".into()],
                working_dir: None,
                timeout_secs: 300
            }
        );
        let b: ModelAdapter = serde_json::from_str(r#"{"kind":"builtin-baseline"}"#).unwrap();
        assert_eq!(b, ModelAdapter::BuiltinBaseline);
    }
}
