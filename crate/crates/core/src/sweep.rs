//! Validation experiments: styled condition suites, transition sweeps,
//! drop detection and ODD compliance.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{confusion_accumulate, iou_from_matrix, ConfusionMatrix, IouReport, Segmenter};
use crate::json;
use crate::registry::CategoryRegistry;
use crate::render::{render, transition_lambdas, RenderParams};
use crate::scene::{Scene, SceneImage, SemanticMask};
use crate::store::VerdictSet;
use crate::style::{apply_style, encode_scene, interpolate_assignment, StyleAssignment, StyleCatalog};

/// Reserved condition name for the unedited style assignment.
pub const ORIGINAL: &str = "original";

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_DROP_THRESHOLD: f64 = 0.3;
pub const DEFAULT_STEPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    SkyOnly,
    AllCategories,
}

/// A named style edit: which categories change and which catalog concept they take.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionSpec {
    pub name: String,
    pub scope: Scope,
    pub style_source: BTreeMap<u8, String>,
}

impl ConditionSpec {
    pub fn sky_only(name: &str, sky: u8, concept: &str) -> Self {
        Self {
            name: name.to_string(),
            scope: Scope::SkyOnly,
            style_source: [(sky, concept.to_string())].into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionFile {
    pub name: String,
    pub scope: Scope,
    /// Category (name or id) → concept label.
    pub style_source: BTreeMap<String, String>,
}

/// On-disk ODD spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OddFile {
    pub conditions: Vec<ConditionFile>,
    /// Condition → category (name or id) → minimum IoU.
    #[serde(default)]
    pub thresholds: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default = "default_threshold")]
    pub default_threshold: f64,
    #[serde(default = "default_drop_threshold")]
    pub drop_threshold: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_drop_threshold() -> f64 {
    DEFAULT_DROP_THRESHOLD
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

#[derive(Debug, Clone, PartialEq)]
pub struct OddSpec {
    pub conditions: Vec<ConditionSpec>,
    pub thresholds: BTreeMap<(String, u8), f64>,
    pub default_threshold: f64,
    pub drop_threshold: f64,
    pub steps: usize,
}

fn check_unit(what: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Odd(format!("{what} {v} is outside [0, 1]")))
    }
}

impl OddSpec {
    pub fn new(conditions: Vec<ConditionSpec>, registry: &CategoryRegistry) -> Result<Self> {
        let spec = Self {
            conditions,
            thresholds: BTreeMap::new(),
            default_threshold: DEFAULT_THRESHOLD,
            drop_threshold: DEFAULT_DROP_THRESHOLD,
            steps: DEFAULT_STEPS,
        };
        spec.validate(registry)?;
        Ok(spec)
    }

    pub fn validate(&self, registry: &CategoryRegistry) -> Result<()> {
        let mut names = BTreeSet::new();
        for c in &self.conditions {
            if c.name.trim().is_empty() || c.name == ORIGINAL {
                return Err(Error::Odd(format!("invalid condition name '{}'", c.name)));
            }
            if !names.insert(c.name.as_str()) {
                return Err(Error::Odd(format!("duplicate condition '{}'", c.name)));
            }
            if let Some(&id) = c.style_source.keys().find(|id| !registry.contains(**id)) {
                return Err(Error::Odd(format!("condition '{}' maps unknown category {id}", c.name)));
            }
            if c.scope == Scope::SkyOnly {
                let sky = registry
                    .sky()
                    .ok_or_else(|| Error::Odd("registry has no 'sky' category".into()))?;
                if c.style_source.len() != 1 || !c.style_source.contains_key(&sky) {
                    return Err(Error::Odd(format!(
                        "sky-only condition '{}' must map exactly the sky category",
                        c.name
                    )));
                }
            }
        }
        check_unit("default_threshold", self.default_threshold)?;
        for ((cond, cat), t) in &self.thresholds {
            if !names.contains(cond.as_str()) {
                return Err(Error::Odd(format!("threshold for unknown condition '{cond}'")));
            }
            if !registry.contains(*cat) {
                return Err(Error::Odd(format!("threshold for unknown category {cat}")));
            }
            check_unit("threshold", *t)?;
        }
        if !(self.drop_threshold > 0.0 && self.drop_threshold <= 1.0) {
            return Err(Error::Odd(format!(
                "drop_threshold {} must lie in (0, 1]",
                self.drop_threshold
            )));
        }
        if self.steps < 2 {
            return Err(Error::Odd("steps must be at least 2".into()));
        }
        Ok(())
    }

    pub fn from_file(file: &OddFile, registry: &CategoryRegistry) -> Result<Self> {
        let conditions = file
            .conditions
            .iter()
            .map(|c| {
                let style_source = c
                    .style_source
                    .iter()
                    .map(|(k, v)| Ok((registry.resolve(k)?, v.clone())))
                    .collect::<Result<_>>()?;
                Ok(ConditionSpec {
                    name: c.name.clone(),
                    scope: c.scope,
                    style_source,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut thresholds = BTreeMap::new();
        for (cond, per_cat) in &file.thresholds {
            for (cat, t) in per_cat {
                thresholds.insert((cond.clone(), registry.resolve(cat)?), *t);
            }
        }
        let spec = Self {
            conditions,
            thresholds,
            default_threshold: file.default_threshold,
            drop_threshold: file.drop_threshold,
            steps: file.steps,
        };
        spec.validate(registry)?;
        Ok(spec)
    }

    pub fn to_file(&self, registry: &CategoryRegistry) -> OddFile {
        let conditions = self
            .conditions
            .iter()
            .map(|c| ConditionFile {
                name: c.name.clone(),
                scope: c.scope,
                style_source: c
                    .style_source
                    .iter()
                    .map(|(id, concept)| (registry.name(*id).to_string(), concept.clone()))
                    .collect(),
            })
            .collect();
        let mut thresholds: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for ((cond, cat), t) in &self.thresholds {
            thresholds
                .entry(cond.clone())
                .or_default()
                .insert(registry.name(*cat).to_string(), *t);
        }
        OddFile {
            conditions,
            thresholds,
            default_threshold: self.default_threshold,
            drop_threshold: self.drop_threshold,
            steps: self.steps,
        }
    }

    pub fn load(path: &Path, registry: &CategoryRegistry) -> Result<Self> {
        let file: OddFile = json::read_json(path)?;
        Self::from_file(&file, registry)
    }

    pub fn save(&self, path: &Path, registry: &CategoryRegistry) -> Result<()> {
        json::write_atomic(path, json::to_pretty_string(&self.to_file(registry))?.as_bytes())
    }

    pub fn condition(&self, name: &str) -> Option<&ConditionSpec> {
        self.conditions.iter().find(|c| c.name == name)
    }

    pub fn threshold(&self, condition: &str, category: u8) -> f64 {
        self.thresholds
            .get(&(condition.to_string(), category))
            .copied()
            .unwrap_or(self.default_threshold)
    }
}

/// The four shipped conditions: cloudy, sunny and night edit the sky only;
/// snow edits every category the catalog labels "snow".
pub fn default_conditions(registry: &CategoryRegistry, catalog: &StyleCatalog) -> Result<Vec<ConditionSpec>> {
    let sky = registry
        .sky()
        .ok_or_else(|| Error::Odd("registry has no 'sky' category".into()))?;
    let mut out: Vec<ConditionSpec> = ["cloudy", "sunny", "night"]
        .into_iter()
        .map(|n| ConditionSpec::sky_only(n, sky, n))
        .collect();
    let snow = catalog
        .categories
        .iter()
        .filter(|c| catalog.lookup(c.id, "snow").is_some())
        .map(|c| (c.id, "snow".to_string()))
        .collect();
    out.push(ConditionSpec {
        name: "snow".into(),
        scope: Scope::AllCategories,
        style_source: snow,
    });
    Ok(out)
}

fn check_catalog(
    catalog: &StyleCatalog,
    conditions: &[ConditionSpec],
    registry: &CategoryRegistry,
) -> Result<()> {
    if catalog.dim < 6 {
        return Err(Error::Config(format!(
            "catalog style dimension {} cannot drive the renderer (needs 6)",
            catalog.dim
        )));
    }
    if let Some(c) = catalog.categories.iter().find(|c| !registry.contains(c.id)) {
        return Err(Error::Config(format!(
            "catalog category {} is not in the registry",
            c.id
        )));
    }
    for cond in conditions {
        for (&cat, concept) in &cond.style_source {
            if catalog.lookup(cat, concept).is_none() {
                return Err(Error::MissingConcept {
                    condition: cond.name.clone(),
                    category: cat,
                    concept: concept.clone(),
                });
            }
        }
    }
    Ok(())
}

/// Style assignment of `scene` under `condition`, starting from `original`.
///
/// `None` means the original styles. Also returns human-readable warnings
/// about edits that had nothing to act on.
pub fn condition_styles(
    scene: &Scene,
    original: &StyleAssignment,
    condition: Option<&ConditionSpec>,
    catalog: &StyleCatalog,
    registry: &CategoryRegistry,
) -> Result<(StyleAssignment, Vec<String>)> {
    let Some(cond) = condition else {
        return Ok((original.clone(), Vec::new()));
    };
    let mut styles = original.clone();
    let mut warnings = Vec::new();
    let present = scene.categories();
    for (&cat, concept) in &cond.style_source {
        let center = catalog.lookup(cat, concept).ok_or_else(|| Error::MissingConcept {
            condition: cond.name.clone(),
            category: cat,
            concept: concept.clone(),
        })?;
        let targets: BTreeSet<u32> = scene
            .regions
            .iter()
            .filter(|r| r.category_id == cat)
            .map(|r| r.region_id)
            .collect();
        if targets.is_empty() && cond.scope == Scope::SkyOnly {
            warnings.push(format!(
                "{}: no {} region, '{}' equals the original render",
                scene.scene_id,
                registry.name(cat),
                cond.name
            ));
        }
        styles = apply_style(&styles, &targets, center)?;
    }
    if cond.scope == Scope::AllCategories {
        for cat in present.iter().filter(|c| !cond.style_source.contains_key(c)) {
            warnings.push(format!(
                "{}: '{}' keeps the original {} style",
                scene.scene_id,
                cond.name,
                registry.name(*cat)
            ));
        }
    }
    Ok((styles, warnings))
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub scene_id: String,
    pub condition: String,
    pub image: SceneImage,
    pub styles: StyleAssignment,
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub params: RenderParams,
    pub conditions: Vec<String>,
    /// Per scene: the original render, then one variant per condition.
    pub variants: Vec<Variant>,
    pub warnings: Vec<String>,
}

impl Suite {
    pub fn originals(&self) -> impl Iterator<Item = &Variant> {
        self.variants.iter().filter(|v| v.condition == ORIGINAL)
    }

    pub fn edited(&self) -> impl Iterator<Item = &Variant> {
        self.variants.iter().filter(|v| v.condition != ORIGINAL)
    }

    pub fn manifest(&self) -> SuiteManifest {
        SuiteManifest {
            noise_seed: self.params.noise_seed,
            conditions: self.conditions.clone(),
            warnings: self.warnings.clone(),
            variants: self
                .variants
                .iter()
                .map(|v| VariantRecord {
                    scene_id: v.scene_id.clone(),
                    condition: v.condition.clone(),
                    styles: v.styles.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub scene_id: String,
    pub condition: String,
    pub styles: StyleAssignment,
}

/// Style vectors behind every rendered variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub noise_seed: u64,
    pub conditions: Vec<String>,
    pub warnings: Vec<String>,
    pub variants: Vec<VariantRecord>,
}

/// Renders every scene under every condition, plus the unedited original.
pub fn build_condition_suite(
    scenes: &[Scene],
    catalog: &StyleCatalog,
    conditions: &[ConditionSpec],
    params: &RenderParams,
    registry: &CategoryRegistry,
) -> Result<Suite> {
    check_catalog(catalog, conditions, registry)?;
    let mut jobs: Vec<(&Scene, Option<&ConditionSpec>)> = Vec::new();
    for scene in scenes {
        jobs.push((scene, None));
        jobs.extend(conditions.iter().map(|c| (scene, Some(c))));
    }
    let originals: BTreeMap<&str, StyleAssignment> = scenes
        .par_iter()
        .map(|s| Ok((s.scene_id.as_str(), encode_scene(s)?)))
        .collect::<Result<_>>()?;
    let rendered: Vec<(Variant, Vec<String>)> = jobs
        .par_iter()
        .map(|(scene, cond)| {
            let original = &originals[scene.scene_id.as_str()];
            let (styles, warnings) = condition_styles(scene, original, *cond, catalog, registry)?;
            let image = render(&scene.mask, &scene.regions, &styles, params)?;
            Ok((
                Variant {
                    scene_id: scene.scene_id.clone(),
                    condition: cond.map_or(ORIGINAL, |c| c.name.as_str()).to_string(),
                    image,
                    styles,
                },
                warnings,
            ))
        })
        .collect::<Result<_>>()?;
    let mut variants = Vec::with_capacity(rendered.len());
    let mut warnings = Vec::new();
    for (v, w) in rendered {
        variants.push(v);
        warnings.extend(w);
    }
    Ok(Suite {
        params: *params,
        conditions: conditions.iter().map(|c| c.name.clone()).collect(),
        variants,
        warnings,
    })
}

/// Identifier passed to the model for one variant.
pub fn sample_id(scene_id: &str, sample: &str) -> String {
    format!("{scene_id}__{sample}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub scene_id: String,
    pub condition: String,
    pub confusion: Option<ConfusionMatrix>,
    pub report: Option<IouReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: String,
    pub aggregate: IouReport,
    pub scored: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResults {
    pub conditions: Vec<ConditionResult>,
    pub samples: Vec<SampleResult>,
    /// True when at least one variant could not be scored.
    pub partial: bool,
}

impl SuiteResults {
    pub fn condition(&self, name: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.condition == name)
    }

    pub fn sample(&self, scene_id: &str, condition: &str) -> Option<&SampleResult> {
        self.samples
            .iter()
            .find(|s| s.scene_id == scene_id && s.condition == condition)
    }
}

pub struct SuiteRun {
    pub results: SuiteResults,
    /// Aligned with `Suite::variants`.
    pub predictions: Vec<Option<SemanticMask>>,
}

fn aggregate(samples: &[&SampleResult], classes: usize) -> IouReport {
    let mut total = ConfusionMatrix::new(classes);
    for m in samples.iter().filter_map(|s| s.confusion.as_ref()) {
        total.merge(m);
    }
    iou_from_matrix(&total)
}

/// Predicts every variant and scores it against its scene's original mask.
///
/// Model failures are recorded per variant and the run continues.
pub fn run_suite(
    suite: &Suite,
    scenes: &[Scene],
    segmenter: &dyn Segmenter,
    registry: &CategoryRegistry,
) -> Result<SuiteRun> {
    let masks: BTreeMap<&str, &SemanticMask> =
        scenes.iter().map(|s| (s.scene_id.as_str(), &s.mask)).collect();
    let mut condition_order: Vec<String> = vec![ORIGINAL.to_string()];
    condition_order.extend(suite.conditions.iter().cloned());

    let mut predictions: Vec<Option<SemanticMask>> = vec![None; suite.variants.len()];
    let mut errors: Vec<Option<String>> = vec![None; suite.variants.len()];
    for cond in &condition_order {
        let idx: Vec<usize> = (0..suite.variants.len())
            .filter(|&i| &suite.variants[i].condition == cond)
            .collect();
        let inputs: Vec<(String, &SceneImage)> = idx
            .iter()
            .map(|&i| {
                let v = &suite.variants[i];
                (sample_id(&v.scene_id, &v.condition), &v.image)
            })
            .collect();
        for (&i, out) in idx.iter().zip(segmenter.predict_batch(&inputs)) {
            match out {
                Ok(mask) => predictions[i] = Some(mask),
                Err(e) => errors[i] = Some(e.to_string()),
            }
        }
    }

    let samples: Vec<SampleResult> = suite
        .variants
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let gt = masks
                .get(v.scene_id.as_str())
                .ok_or_else(|| Error::UnknownScene(v.scene_id.clone()))?;
            let mut result = SampleResult {
                scene_id: v.scene_id.clone(),
                condition: v.condition.clone(),
                confusion: None,
                report: None,
                error: errors[i].clone(),
            };
            if let Some(pred) = &predictions[i] {
                match confusion_accumulate(gt, pred, registry) {
                    Ok(m) => {
                        result.report = Some(iou_from_matrix(&m));
                        result.confusion = Some(m);
                    }
                    Err(e) => result.error = Some(e.to_string()),
                }
            }
            Ok(result)
        })
        .collect::<Result<_>>()?;

    let conditions = condition_order
        .iter()
        .map(|cond| {
            let members: Vec<&SampleResult> = samples.iter().filter(|s| &s.condition == cond).collect();
            let scored = members.iter().filter(|s| s.confusion.is_some()).count();
            ConditionResult {
                condition: cond.clone(),
                aggregate: aggregate(&members, registry.len()),
                scored,
                failed: members.len() - scored,
            }
        })
        .collect();
    let partial = samples.iter().any(|s| s.confusion.is_none());
    for (p, s) in predictions.iter_mut().zip(&samples) {
        if s.confusion.is_none() {
            *p = None;
        }
    }
    Ok(SuiteRun {
        results: SuiteResults {
            conditions,
            samples,
            partial,
        },
        predictions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlagKind {
    Drop,
    Recovery,
}

/// An adjacent-step IoU jump of at least the drop threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFlag {
    /// Index of the earlier step; the jump is `step -> step + 1`.
    pub step: usize,
    pub iou_before: f64,
    pub iou_after: f64,
    /// Magnitude of the jump.
    pub delta: f64,
    pub kind: FlagKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropFlag {
    pub scene_id: String,
    pub category_id: u8,
    #[serde(flatten)]
    pub flag: StepFlag,
}

fn flag_pair(step: usize, before: f64, after: f64, threshold: f64) -> Option<StepFlag> {
    let (kind, delta) = if before - after >= threshold {
        (FlagKind::Drop, before - after)
    } else if after - before >= threshold {
        (FlagKind::Recovery, after - before)
    } else {
        return None;
    };
    Some(StepFlag {
        step,
        iou_before: before,
        iou_after: after,
        delta,
        kind,
    })
}

/// Flags every adjacent pair whose IoU falls (or recovers) by at least `threshold`.
pub fn detect_drops(series: &[f64], threshold: f64) -> Result<Vec<StepFlag>> {
    if series.len() < 2 || series.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidSeries);
    }
    Ok(series
        .windows(2)
        .enumerate()
        .filter_map(|(i, w)| flag_pair(i, w[0], w[1], threshold))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepStep {
    pub lambda: f64,
    pub report: Option<IouReport>,
    pub focus_iou: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub scene_id: String,
    pub from: String,
    pub to: String,
    pub focus_category: u8,
    pub lambdas: Vec<f64>,
    pub steps: Vec<SweepStep>,
    pub drop_threshold: f64,
    pub flags: Vec<DropFlag>,
}

impl SweepResult {
    pub fn focus_series(&self) -> Vec<Option<f64>> {
        self.steps.iter().map(|s| s.focus_iou).collect()
    }
}

pub struct SweepRun {
    pub result: SweepResult,
    pub frames: Vec<SceneImage>,
    pub predictions: Vec<Option<SemanticMask>>,
}

/// Sample identifier of one transition frame, used for verdicts.
pub fn sweep_sample(from: &str, to: &str, step: usize) -> String {
    format!("sweep:{from}:{to}:{step}")
}

pub struct SweepRequest<'a> {
    pub from: Option<&'a ConditionSpec>,
    pub to: Option<&'a ConditionSpec>,
    pub steps: usize,
    pub focus: u8,
    pub drop_threshold: f64,
}

/// Renders, predicts and scores a transition between two conditions of one scene.
pub fn transition_sweep(
    scene: &Scene,
    catalog: &StyleCatalog,
    request: &SweepRequest<'_>,
    segmenter: &dyn Segmenter,
    params: &RenderParams,
    registry: &CategoryRegistry,
) -> Result<SweepResult> {
    sweep_with_frames(scene, catalog, request, segmenter, params, registry).map(|r| r.result)
}

pub fn sweep_with_frames(
    scene: &Scene,
    catalog: &StyleCatalog,
    request: &SweepRequest<'_>,
    segmenter: &dyn Segmenter,
    params: &RenderParams,
    registry: &CategoryRegistry,
) -> Result<SweepRun> {
    if !scene.mask.labels().contains(&request.focus) {
        return Err(Error::FocusAbsent {
            scene: scene.scene_id.clone(),
            category: request.focus,
        });
    }
    let lambdas = transition_lambdas(request.steps)?;
    let conds: Vec<ConditionSpec> = [request.from, request.to].into_iter().flatten().cloned().collect();
    check_catalog(catalog, &conds, registry)?;
    let original = encode_scene(scene)?;
    let (a, _) = condition_styles(scene, &original, request.from, catalog, registry)?;
    let (b, _) = condition_styles(scene, &original, request.to, catalog, registry)?;
    let frames: Vec<SceneImage> = lambdas
        .par_iter()
        .map(|&l| {
            let styles = interpolate_assignment(&a, &b, l)?;
            render(&scene.mask, &scene.regions, &styles, params)
        })
        .collect::<Result<_>>()?;

    let from = request.from.map_or(ORIGINAL, |c| c.name.as_str()).to_string();
    let to = request.to.map_or(ORIGINAL, |c| c.name.as_str()).to_string();
    let inputs: Vec<(String, &SceneImage)> = frames
        .iter()
        .enumerate()
        .map(|(i, f)| (sample_id(&scene.scene_id, &format!("{from}-{to}-{i}")), f))
        .collect();
    let mut predictions = Vec::with_capacity(frames.len());
    let mut steps = Vec::with_capacity(frames.len());
    for (lambda, out) in lambdas.iter().zip(segmenter.predict_batch(&inputs)) {
        let scored = out
            .map_err(|e| e.to_string())
            .and_then(|pred| {
                confusion_accumulate(&scene.mask, &pred, registry)
                    .map(|m| (pred, iou_from_matrix(&m)))
                    .map_err(|e| e.to_string())
            });
        match scored {
            Ok((pred, report)) => {
                steps.push(SweepStep {
                    lambda: *lambda,
                    focus_iou: report.iou(request.focus),
                    report: Some(report),
                    error: None,
                });
                predictions.push(Some(pred));
            }
            Err(e) => {
                steps.push(SweepStep {
                    lambda: *lambda,
                    report: None,
                    focus_iou: None,
                    error: Some(e),
                });
                predictions.push(None);
            }
        }
    }
    let flags = steps
        .windows(2)
        .enumerate()
        .filter_map(|(i, w)| match (w[0].focus_iou, w[1].focus_iou) {
            (Some(a), Some(b)) => flag_pair(i, a, b, request.drop_threshold),
            _ => None,
        })
        .map(|flag| DropFlag {
            scene_id: scene.scene_id.clone(),
            category_id: request.focus,
            flag,
        })
        .collect();
    Ok(SweepRun {
        result: SweepResult {
            scene_id: scene.scene_id.clone(),
            from,
            to,
            focus_category: request.focus,
            lambdas,
            steps,
            drop_threshold: request.drop_threshold,
            flags,
        },
        frames,
        predictions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellStatus {
    Pass,
    Fail,
    InsufficientEvidence,
    /// Category absent from every surviving sample of the condition.
    NotScored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceCell {
    pub condition: String,
    pub category_id: u8,
    pub category: String,
    pub iou: Option<f64>,
    pub threshold: f64,
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub samples: usize,
    pub scored: usize,
    pub failed: usize,
    pub excluded: usize,
    pub audited: usize,
    pub audited_fraction: f64,
    pub mean_iou: Option<f64>,
    pub mean_iou_all: Option<f64>,
    pub frequency_weighted_iou: Option<f64>,
    pub insufficient_evidence: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Overall {
    Pass,
    Fail,
    InsufficientEvidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub overall: Overall,
    pub mean_aggregation: String,
    pub conditions: Vec<ConditionSummary>,
    pub cells: Vec<ComplianceCell>,
}

impl ComplianceReport {
    pub fn cell(&self, condition: &str, category: u8) -> Option<&ComplianceCell> {
        self.cells
            .iter()
            .find(|c| c.condition == condition && c.category_id == category)
    }

    /// Cells of `other` whose value or status differ from this report.
    pub fn changed_cells(&self, other: &Self) -> Vec<ComplianceCell> {
        other
            .cells
            .iter()
            .filter(|c| self.cell(&c.condition, c.category_id) != Some(*c))
            .cloned()
            .collect()
    }

    /// Process exit code for CI gating: 0 pass, 2 fail, 3 insufficient evidence.
    pub fn exit_code(&self) -> i32 {
        match self.overall {
            Overall::Pass => 0,
            Overall::Fail => 2,
            Overall::InsufficientEvidence => 3,
        }
    }

    /// One row per condition × category.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["condition", "category_id", "category", "iou", "threshold", "status"])?;
        for c in &self.cells {
            let status = serde_json::to_value(c.status)?;
            w.write_record([
                c.condition.clone(),
                c.category_id.to_string(),
                c.category.clone(),
                c.iou.map(|v| v.to_string()).unwrap_or_default(),
                c.threshold.to_string(),
                status.as_str().unwrap_or_default().to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Aggregates the accepted samples of every ODD condition and checks thresholds.
///
/// Rejected samples never contribute. A condition without surviving samples
/// yields "insufficient evidence" cells. Overall: fail if any cell fails,
/// otherwise insufficient evidence if any condition lacks evidence, otherwise pass.
pub fn evaluate_compliance(
    results: &SuiteResults,
    odd: &OddSpec,
    verdicts: &VerdictSet,
    registry: &CategoryRegistry,
) -> Result<ComplianceReport> {
    let mut conditions = Vec::new();
    let mut cells = Vec::new();
    for cond in &odd.conditions {
        let members: Vec<&SampleResult> = results
            .samples
            .iter()
            .filter(|s| s.condition == cond.name)
            .collect();
        if members.is_empty() {
            return Err(Error::Odd(format!("no suite results for condition '{}'", cond.name)));
        }
        let excluded = members
            .iter()
            .filter(|s| verdicts.is_rejected(&s.scene_id, &s.condition))
            .count();
        let audited = members
            .iter()
            .filter(|s| verdicts.get(&s.scene_id, &s.condition).is_some())
            .count();
        let surviving: Vec<&SampleResult> = members
            .iter()
            .copied()
            .filter(|s| s.confusion.is_some() && !verdicts.is_rejected(&s.scene_id, &s.condition))
            .collect();
        let scored = members.iter().filter(|s| s.confusion.is_some()).count();
        let insufficient = surviving.is_empty();
        let report = aggregate(&surviving, registry.len());
        for cat in registry.entries() {
            let threshold = odd.threshold(&cond.name, cat.id);
            let iou = if insufficient { None } else { report.iou(cat.id) };
            let status = match (insufficient, iou) {
                (true, _) => CellStatus::InsufficientEvidence,
                (false, None) => CellStatus::NotScored,
                (false, Some(v)) if v >= threshold => CellStatus::Pass,
                (false, Some(_)) => CellStatus::Fail,
            };
            cells.push(ComplianceCell {
                condition: cond.name.clone(),
                category_id: cat.id,
                category: cat.name.clone(),
                iou,
                threshold,
                status,
            });
        }
        conditions.push(ConditionSummary {
            condition: cond.name.clone(),
            samples: members.len(),
            scored,
            failed: members.len() - scored,
            excluded,
            audited,
            audited_fraction: audited as f64 / members.len() as f64,
            mean_iou: report.mean_iou.filter(|_| !insufficient),
            mean_iou_all: report.mean_iou_all.filter(|_| !insufficient),
            frequency_weighted_iou: report.frequency_weighted_iou.filter(|_| !insufficient),
            insufficient_evidence: insufficient,
        });
    }
    let overall = if cells.iter().any(|c| c.status == CellStatus::Fail) {
        Overall::Fail
    } else if conditions.iter().any(|c| c.insufficient_evidence) {
        Overall::InsufficientEvidence
    } else {
        Overall::Pass
    };
    Ok(ComplianceReport {
        overall,
        mean_aggregation: "macro mean over present categories".into(),
        conditions,
        cells,
    })
}
