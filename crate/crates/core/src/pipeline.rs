//! Stage orchestration for one run: encode, cluster, label, suite, sweep,
//! comply and verdicts. Every stage reads its inputs from the run directory
//! and writes its outputs back there.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Utc;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{fit_baseline, BaselineModel, ModelAdapter, Segmenter};
use crate::hash::sha256_hex;
use crate::json;
use crate::registry::CategoryRegistry;
use crate::render::{transition_frame_name, RenderParams};
use crate::scene::{dataset_ids, image_path, load_dataset, load_scene, mask_path, Scene};
use crate::store::{run_id, RunManifest, SampleKey, Store, Verdict, VerdictAck, VerdictKind, TOOL_VERSION};
use crate::style::{
    build_style_space, cluster_styles, encode_scene, interpolate_assignment, KMeansParams, StyleAssignment,
    StyleVector,
    StyleCatalog, StyleSpace,
};
use crate::sweep::{
    build_condition_suite, condition_styles, default_conditions, evaluate_compliance, run_suite, sweep_sample,
    sweep_with_frames, ComplianceCell, ComplianceReport, ConditionSpec, OddSpec, SuiteManifest, SuiteResults,
    SweepRequest, SweepResult, ORIGINAL,
};

pub const STYLE_SPACE_FILE: &str = "style_space.json";
pub const CATALOG_FILE: &str = "catalog.json";
pub const ODD_SNAPSHOT_FILE: &str = "odd.json";
pub const MODEL_FILE: &str = "model.json";

/// Sizes the global worker pool; 0 keeps rayon's default of one thread per core.
pub fn configure_threads(n: usize) {
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn load_registry(config: &Config) -> Result<CategoryRegistry> {
    match &config.registry {
        Some(p) => CategoryRegistry::load(p),
        None => Ok(CategoryRegistry::railsem19()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodeOutcome {
    pub scenes: usize,
    pub regions: usize,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub results: SuiteResults,
    pub manifest: SuiteManifest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplyOutcome {
    pub report: ComplianceReport,
    /// Cells that differ from the previously persisted report.
    pub changed: Vec<ComplianceCell>,
}

/// A reference style for a concept, used to label the nearest cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    /// Category name or id.
    pub category: String,
    pub concept: String,
    pub style: StyleVector,
}

/// Name of the report a sweep persists.
pub fn sweep_report_name(scene_id: &str, from: &str, to: &str) -> String {
    format!("sweep_{scene_id}_{from}_{to}")
}

/// Styles of `scene` at `lambda` on the line from condition `from` to `to`.
pub fn interpolated_styles(
    scene: &Scene,
    catalog: &StyleCatalog,
    from: Option<&ConditionSpec>,
    to: Option<&ConditionSpec>,
    lambda: f64,
    registry: &CategoryRegistry,
) -> Result<StyleAssignment> {
    let original = encode_scene(scene)?;
    let (a, _) = condition_styles(scene, &original, from, catalog, registry)?;
    let (b, _) = condition_styles(scene, &original, to, catalog, registry)?;
    interpolate_assignment(&a, &b, lambda)
}

pub struct Workspace {
    config: Config,
    registry: CategoryRegistry,
    store: Arc<Store>,
    manifest: RunManifest,
}

impl Workspace {
    /// Creates (or reopens) the run determined by `config`.
    pub fn open(config: Config) -> Result<Self> {
        let registry = load_registry(&config)?;
        let input_ids = dataset_ids(&config.dataset_root)?;
        if input_ids.is_empty() {
            return Err(Error::Config(format!(
                "no image/mask pairs under {}",
                config.dataset_root.display()
            )));
        }
        let style_input_ids = dataset_ids(config.style_root())?;
        let config_hash = config.content_hash();
        let registry_hash = registry.content_hash();
        let id = run_id(&config_hash, &registry_hash, &config.seeds, &input_ids, &style_input_ids);
        let store = Arc::new(Store::open(&config.store)?);
        let manifest = store.create_run(RunManifest {
            run_id: id,
            tool_version: TOOL_VERSION.to_string(),
            dataset_root: config.dataset_root.clone(),
            registry_hash,
            config_hash,
            seeds: config.seeds.clone(),
            input_ids,
            style_input_ids,
            catalog_hash: None,
            odd_hash: None,
            created_at: Utc::now(),
            config: serde_json::to_value(&config)?,
        })?;
        Ok(Self {
            config,
            registry,
            store,
            manifest,
        })
    }

    /// Reopens an existing run from its stored manifest.
    pub fn resume(store_root: &Path, run_id: &str) -> Result<Self> {
        Self::resume_in(Arc::new(Store::open(store_root)?), run_id)
    }

    /// Like [`Workspace::resume`], sharing an already opened store.
    pub fn resume_in(store: Arc<Store>, run_id: &str) -> Result<Self> {
        let manifest = store.manifest(run_id)?;
        let mut config: Config = serde_json::from_value(manifest.config.clone())?;
        config.store = store.root().to_path_buf();
        let registry = load_registry(&config)?;
        Ok(Self {
            config,
            registry,
            store,
            manifest,
        })
    }

    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn registry(&self) -> &CategoryRegistry {
        &self.registry
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn run_dir(&self) -> PathBuf {
        self.store.run_dir(self.run_id())
    }

    pub fn render_params(&self) -> RenderParams {
        RenderParams::new(self.config.seeds.render)
    }

    fn missing(&self, what: impl Into<String>, command: &'static str) -> Error {
        Error::MissingStage {
            run: self.run_id().to_string(),
            missing: what.into(),
            command,
        }
    }

    pub fn scenes(&self) -> Result<Vec<Scene>> {
        load_dataset(&self.config.dataset_root, &self.registry, self.config.min_area)
    }

    pub fn scene(&self, scene_id: &str) -> Result<Scene> {
        if !self.manifest.input_ids.iter().any(|id| id == scene_id) {
            return Err(Error::UnknownScene(scene_id.to_string()));
        }
        let root = &self.config.dataset_root;
        load_scene(
            &image_path(root, scene_id),
            &mask_path(root, scene_id),
            &self.registry,
            self.config.min_area,
        )
    }

    pub fn style_space_path(&self) -> PathBuf {
        self.run_dir().join(STYLE_SPACE_FILE)
    }

    pub fn catalog_path(&self) -> PathBuf {
        self.config
            .catalog
            .clone()
            .unwrap_or_else(|| self.run_dir().join(CATALOG_FILE))
    }

    /// Encodes every region of the style dataset.
    pub fn encode(&self) -> Result<EncodeOutcome> {
        let scenes = load_dataset(self.config.style_root(), &self.registry, self.config.min_area)?;
        let space = build_style_space(&scenes)?;
        let path = self.style_space_path();
        space.save(&path)?;
        Ok(EncodeOutcome {
            scenes: scenes.len(),
            regions: space.len(),
            path,
        })
    }

    pub fn style_space(&self) -> Result<StyleSpace> {
        let path = self.style_space_path();
        if !path.is_file() {
            return Err(self.missing("style space", "encode"));
        }
        StyleSpace::load(&path)
    }

    pub fn cluster(&mut self) -> Result<StyleCatalog> {
        let space = self.style_space()?;
        let mut params = KMeansParams::new(self.config.k, self.config.seeds.cluster);
        params.restarts = self.config.kmeans_restarts.max(1);
        let catalog = cluster_styles(&space, &params)?;
        self.save_catalog(&catalog)?;
        match self.config.prototypes.clone() {
            Some(path) => {
                let prototypes: Vec<Prototype> = json::read_json(&path)?;
                self.label_from_prototypes(&prototypes)
            }
            None => Ok(catalog),
        }
    }

    fn save_catalog(&mut self, catalog: &StyleCatalog) -> Result<()> {
        catalog.save(&self.catalog_path())?;
        self.manifest.catalog_hash = Some(catalog.content_hash()?);
        self.store.write_manifest(&self.manifest)
    }

    pub fn catalog(&self) -> Result<StyleCatalog> {
        let path = self.catalog_path();
        if !path.is_file() {
            return Err(self.missing("style catalog", "cluster"));
        }
        StyleCatalog::load(&path)
    }

    /// Attaches a concept label to one cluster of `category` (name or id).
    pub fn label(&mut self, category: &str, cluster: usize, concept: &str) -> Result<StyleCatalog> {
        let id = self.registry.resolve(category)?;
        let catalog = self.catalog()?.label_concept(id, cluster, concept)?;
        self.save_catalog(&catalog)?;
        Ok(catalog)
    }

    /// Labels, for each prototype, the nearest cluster of its category.
    pub fn label_from_prototypes(&mut self, prototypes: &[Prototype]) -> Result<StyleCatalog> {
        let mut catalog = self.catalog()?;
        for p in prototypes {
            let id = self.registry.resolve(&p.category)?;
            let index = catalog.nearest_cluster(id, &p.style).ok_or_else(|| {
                Error::Config(format!(
                    "no cluster of '{}' matches the {}-dimensional prototype '{}'",
                    p.category,
                    p.style.dim(),
                    p.concept
                ))
            })?;
            catalog = catalog.label_concept(id, index, &p.concept)?;
        }
        self.save_catalog(&catalog)?;
        Ok(catalog)
    }

    /// ODD spec from the config, or the default conditions over `catalog`.
    pub fn odd(&self, catalog: &StyleCatalog) -> Result<OddSpec> {
        match &self.config.odd {
            Some(p) => OddSpec::load(p, &self.registry),
            None => OddSpec::new(default_conditions(&self.registry, catalog)?, &self.registry),
        }
    }

    /// ODD spec snapshotted by the last suite run.
    pub fn odd_snapshot(&self) -> Result<OddSpec> {
        let path = self.run_dir().join(ODD_SNAPSHOT_FILE);
        if !path.is_file() {
            return Err(self.missing("ODD snapshot", "suite"));
        }
        OddSpec::load(&path, &self.registry)
    }

    /// Baseline model stored by the suite stage, or a fresh fit when there is none.
    pub fn baseline(&self) -> Result<BaselineModel> {
        let path = self.run_dir().join(MODEL_FILE);
        if path.is_file() {
            return json::read_json(&path);
        }
        let scenes = load_dataset(self.config.fit_root(), &self.registry, self.config.min_area)?;
        Ok(fit_baseline(&scenes, &self.registry))
    }

    pub fn segmenter(&self) -> Result<Box<dyn Segmenter>> {
        let model = match self.config.adapter {
            ModelAdapter::BuiltinBaseline => Some(self.baseline()?),
            ModelAdapter::ExternalCommand { .. } => None,
        };
        self.config.adapter.segmenter(model.as_ref(), &self.registry)
    }

    /// Renders and scores the condition suite over every test scene.
    pub fn suite(&mut self) -> Result<SuiteOutcome> {
        let catalog = self.catalog()?;
        let odd = self.odd(&catalog)?;
        let scenes = self.scenes()?;
        let suite = build_condition_suite(&scenes, &catalog, &odd.conditions, &self.render_params(), &self.registry)?;
        if self.config.adapter == ModelAdapter::BuiltinBaseline {
            let model = self.baseline()?;
            json::write_atomic(&self.run_dir().join(MODEL_FILE), json::to_pretty_string(&model)?.as_bytes())?;
        }
        let segmenter = self.segmenter()?;
        let run = run_suite(&suite, &scenes, segmenter.as_ref(), &self.registry)?;

        let id = self.run_id().to_string();
        suite
            .variants
            .par_iter()
            .zip(&run.predictions)
            .try_for_each(|(v, pred)| {
                let name = format!("{}_{}.png", v.scene_id, v.condition);
                self.store.write_artifact(&id, &format!("renders/{name}"), &v.image.to_png())?;
                if let Some(p) = pred {
                    self.store.write_artifact(&id, &format!("predictions/{name}"), &p.to_png())?;
                }
                Ok::<_, Error>(())
            })?;

        let manifest = suite.manifest();
        self.store.persist_report(&id, "suite", &run.results)?;
        self.store.persist_report(&id, "suite_manifest", &manifest)?;
        let odd_text = json::to_pretty_string(&odd.to_file(&self.registry))?;
        self.store.write_artifact(&id, ODD_SNAPSHOT_FILE, odd_text.as_bytes())?;
        self.store.register_samples(
            &id,
            suite.variants.iter().map(|v| SampleKey {
                scene_id: v.scene_id.clone(),
                sample: v.condition.clone(),
            }),
        )?;
        self.manifest.odd_hash = Some(sha256_hex(odd_text.as_bytes()));
        self.manifest.catalog_hash = Some(catalog.content_hash()?);
        self.store.write_manifest(&self.manifest)?;
        Ok(SuiteOutcome {
            results: run.results,
            manifest,
        })
    }

    fn condition<'a>(&self, odd: &'a OddSpec, name: &str) -> Result<Option<&'a ConditionSpec>> {
        if name == ORIGINAL {
            return Ok(None);
        }
        odd.condition(name)
            .map(Some)
            .ok_or_else(|| Error::Odd(format!("unknown condition '{name}'")))
    }

    /// Transition sweep of one scene between two conditions (or `original`).
    pub fn sweep(
        &self,
        scene_id: &str,
        from: &str,
        to: &str,
        steps: Option<usize>,
        focus: Option<&str>,
    ) -> Result<SweepResult> {
        let scene = self.scene(scene_id)?;
        let catalog = self.catalog()?;
        let odd = self.odd(&catalog)?;
        let focus = self.registry.resolve(focus.unwrap_or(&self.config.focus))?;
        let request = SweepRequest {
            from: self.condition(&odd, from)?,
            to: self.condition(&odd, to)?,
            steps: steps.unwrap_or(odd.steps),
            focus,
            drop_threshold: odd.drop_threshold,
        };
        let segmenter = self.segmenter()?;
        let run = sweep_with_frames(
            &scene,
            &catalog,
            &request,
            segmenter.as_ref(),
            &self.render_params(),
            &self.registry,
        )?;

        let id = self.run_id().to_string();
        for (i, (frame, pred)) in run.frames.iter().zip(&run.predictions).enumerate() {
            let name = transition_frame_name(scene_id, from, to, i);
            self.store.write_artifact(&id, &format!("renders/{name}"), &frame.to_png())?;
            if let Some(p) = pred {
                self.store.write_artifact(&id, &format!("predictions/{name}"), &p.to_png())?;
            }
        }
        self.store
            .persist_report(&id, &sweep_report_name(scene_id, from, to), &run.result)?;
        self.store.register_samples(
            &id,
            (0..run.frames.len()).map(|i| SampleKey {
                scene_id: scene_id.to_string(),
                sample: sweep_sample(from, to, i),
            }),
        )?;
        Ok(run.result)
    }

    pub fn suite_results(&self) -> Result<SuiteResults> {
        if !self.store.has_report(self.run_id(), "suite") {
            return Err(self.missing("suite report", "suite"));
        }
        self.store.load_report(self.run_id(), "suite")
    }

    /// Compliance from the suite results, the snapshotted ODD and current verdicts.
    pub fn compliance(&self) -> Result<ComplianceReport> {
        let results = self.suite_results()?;
        let odd = self.odd_snapshot()?;
        let verdicts = self.store.effective_verdicts(self.run_id())?;
        evaluate_compliance(&results, &odd, &verdicts, &self.registry)
    }

    /// Recomputes and persists the compliance report.
    pub fn comply(&self) -> Result<ComplyOutcome> {
        let report = self.compliance()?;
        let id = self.run_id();
        let changed = if self.store.has_report(id, "compliance") {
            let previous: ComplianceReport = self.store.load_report(id, "compliance")?;
            previous.changed_cells(&report)
        } else {
            Vec::new()
        };
        self.store.persist_report(id, "compliance", &report)?;
        self.store.export_compliance_csv(id, &report)?;
        Ok(ComplyOutcome { report, changed })
    }

    pub fn record_verdict(
        &self,
        scene_id: &str,
        sample: &str,
        verdict: VerdictKind,
        reason: &str,
        author: &str,
    ) -> Result<VerdictAck> {
        self.store.record_verdict(&Verdict {
            run_id: self.run_id().to_string(),
            scene_id: scene_id.to_string(),
            sample: sample.to_string(),
            verdict,
            reason: reason.to_string(),
            author: author.to_string(),
            timestamp: Utc::now(),
        })
    }
}
