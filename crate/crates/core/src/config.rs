//! Harness configuration file (JSON).
//!
//! Relative paths are resolved against the directory holding the config
//! file. `ODDFORGE_STORE` overrides the store location.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ModelAdapter;
use crate::hash::sha256_hex;
use crate::json;
use crate::scene::DEFAULT_MIN_AREA;
use crate::store::Seeds;

pub const STORE_ENV: &str = "ODDFORGE_STORE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Scenes under test.
    pub dataset_root: PathBuf,
    /// Scenes whose regions populate the style space; defaults to `dataset_root`.
    #[serde(default)]
    pub style_dataset_root: Option<PathBuf>,
    /// Scenes the builtin baseline is fitted on; defaults to `dataset_root`.
    #[serde(default)]
    pub baseline_fit_root: Option<PathBuf>,
    /// Category registry file; the bundled RailSem19 registry when absent.
    #[serde(default)]
    pub registry: Option<PathBuf>,
    /// Catalog file; `<run>/catalog.json` when absent.
    #[serde(default)]
    pub catalog: Option<PathBuf>,
    /// Concept prototypes applied right after clustering.
    #[serde(default)]
    pub prototypes: Option<PathBuf>,
    /// ODD spec file; the default four conditions when absent.
    #[serde(default)]
    pub odd: Option<PathBuf>,
    #[serde(default = "default_store")]
    pub store: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Seeds,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_restarts")]
    pub kmeans_restarts: usize,
    #[serde(default = "default_min_area")]
    pub min_area: usize,
    #[serde(default)]
    pub adapter: ModelAdapter,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub parallelism: usize,
    /// Category whose IoU transition sweeps and on-demand renders track.
    #[serde(default = "default_focus")]
    pub focus: String,
}

fn default_store() -> PathBuf {
    PathBuf::from("oddforge-store")
}

fn default_seeds() -> Seeds {
    Seeds {
        cluster: 0,
        render: 0,
    }
}

fn default_k() -> usize {
    10
}

fn default_restarts() -> usize {
    10
}

fn default_min_area() -> usize {
    DEFAULT_MIN_AREA
}

fn default_focus() -> String {
    "rail-track".into()
}

impl Config {
    pub fn new(dataset_root: impl Into<PathBuf>) -> Self {
        Self {
            dataset_root: dataset_root.into(),
            style_dataset_root: None,
            baseline_fit_root: None,
            registry: None,
            catalog: None,
            prototypes: None,
            odd: None,
            store: default_store(),
            seeds: default_seeds(),
            k: default_k(),
            kmeans_restarts: default_restarts(),
            min_area: default_min_area(),
            adapter: ModelAdapter::default(),
            parallelism: 0,
            focus: default_focus(),
        }
    }

    /// Reads a config file, resolves relative paths and applies `ODDFORGE_STORE`.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config: Config = json::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        if let Some(store) = std::env::var_os(STORE_ENV) {
            config.store = PathBuf::from(store);
        }
        config.check()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset_root);
        fix(&mut self.store);
        for p in [
            &mut self.style_dataset_root,
            &mut self.baseline_fit_root,
            &mut self.registry,
            &mut self.catalog,
            &mut self.prototypes,
            &mut self.odd,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if let ModelAdapter::ExternalCommand {
            working_dir: Some(dir),
            ..
        } = &mut self.adapter
        {
            fix(dir);
        }
    }

    /// Checks that every input path that must already exist does.
    pub fn check(&self) -> Result<()> {
        let need_dir = |p: &Path, what: &str| {
            if p.is_dir() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} {} is not a directory", p.display())))
            }
        };
        need_dir(&self.dataset_root, "dataset_root")?;
        if let Some(p) = &self.style_dataset_root {
            need_dir(p, "style_dataset_root")?;
        }
        if let Some(p) = &self.baseline_fit_root {
            need_dir(p, "baseline_fit_root")?;
        }
        for (p, what) in [
            (&self.registry, "registry"),
            (&self.odd, "odd"),
            (&self.prototypes, "prototypes"),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::Config(format!("{what} file {} does not exist", p.display())));
                }
            }
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        Ok(())
    }

    pub fn style_root(&self) -> &Path {
        self.style_dataset_root.as_deref().unwrap_or(&self.dataset_root)
    }

    pub fn fit_root(&self) -> &Path {
        self.baseline_fit_root.as_deref().unwrap_or(&self.dataset_root)
    }

    /// Hash of everything except the store location.
    pub fn content_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("store");
        }
        sha256_hex(v.to_string().as_bytes())
    }
}
