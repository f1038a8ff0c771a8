//! Flat-file run store.
//!
//! ```text
//! <store>/runs/<run_id>/manifest.json
//! <store>/runs/<run_id>/reports/*.json
//! <store>/runs/<run_id>/verdicts.ndjson
//! <store>/runs/<run_id>/renders/*.png
//! ```
//!
//! Reports are written atomically. The verdict log is append-only; the
//! effective verdict of a sample is the last one logged for it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::json;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub cluster: u64,
    pub render: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub dataset_root: PathBuf,
    pub registry_hash: String,
    pub config_hash: String,
    pub seeds: Seeds,
    /// Scenes under test.
    pub input_ids: Vec<String>,
    /// Scenes whose regions populate the style space.
    pub style_input_ids: Vec<String>,
    #[serde(default)]
    pub catalog_hash: Option<String>,
    #[serde(default)]
    pub odd_hash: Option<String>,
    pub created_at: DateTime<Utc>,
    /// Resolved configuration the run was created from.
    pub config: serde_json::Value,
}

/// Content hash over everything that determines a run's results.
pub fn run_id(
    config_hash: &str,
    registry_hash: &str,
    seeds: &Seeds,
    input_ids: &[String],
    style_input_ids: &[String],
) -> String {
    let key = serde_json::json!({
        "config": config_hash,
        "registry": registry_hash,
        "seeds": seeds,
        "inputs": input_ids,
        "style_inputs": style_input_ids,
    });
    sha256_hex(key.to_string().as_bytes())[..16].to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictKind {
    Accepted,
    Rejected,
}

/// An auditor's decision on one synthesized sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub run_id: String,
    pub scene_id: String,
    /// Condition name, or a `sweep:<from>:<to>:<step>` frame id.
    pub sample: String,
    pub verdict: VerdictKind,
    #[serde(default)]
    pub reason: String,
    #[serde(default)]
    pub author: String,
    pub timestamp: DateTime<Utc>,
}

/// Latest verdict per `(scene, sample)`; samples without one count as accepted.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerdictSet {
    effective: BTreeMap<String, BTreeMap<String, Verdict>>,
}

impl VerdictSet {
    pub fn from_log(log: &[Verdict]) -> Self {
        let mut set = Self::default();
        for v in log {
            set.insert(v.clone());
        }
        set
    }

    pub fn insert(&mut self, v: Verdict) {
        self.effective
            .entry(v.scene_id.clone())
            .or_default()
            .insert(v.sample.clone(), v);
    }

    pub fn insert_rejection(&mut self, scene_id: &str, sample: &str) {
        self.insert(Verdict {
            run_id: String::new(),
            scene_id: scene_id.to_string(),
            sample: sample.to_string(),
            verdict: VerdictKind::Rejected,
            reason: String::new(),
            author: String::new(),
            timestamp: DateTime::<Utc>::UNIX_EPOCH,
        });
    }

    pub fn get(&self, scene_id: &str, sample: &str) -> Option<&Verdict> {
        self.effective.get(scene_id)?.get(sample)
    }

    pub fn is_rejected(&self, scene_id: &str, sample: &str) -> bool {
        self.get(scene_id, sample)
            .is_some_and(|v| v.verdict == VerdictKind::Rejected)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Verdict> {
        self.effective.values().flat_map(|m| m.values())
    }

    pub fn len(&self) -> usize {
        self.effective.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictAck {
    pub effective: Verdict,
    /// Number of verdicts logged for this sample, including this one.
    pub history_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleKey {
    pub scene_id: String,
    pub sample: String,
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    verdict_lock: Mutex<()>,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let runs = root.join("runs");
        std::fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
        Ok(Self {
            root,
            verdict_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn has_run(&self, run_id: &str) -> bool {
        valid_name(run_id) && self.run_dir(run_id).join("manifest.json").is_file()
    }

    fn require_run(&self, run_id: &str) -> Result<PathBuf> {
        if self.has_run(run_id) {
            Ok(self.run_dir(run_id))
        } else {
            Err(Error::UnknownRun(run_id.to_string()))
        }
    }

    /// Creates the run directory, keeping `created_at` of an existing manifest.
    pub fn create_run(&self, mut manifest: RunManifest) -> Result<RunManifest> {
        if let Ok(existing) = self.manifest(&manifest.run_id) {
            manifest.created_at = existing.created_at;
            manifest.catalog_hash = manifest.catalog_hash.or(existing.catalog_hash);
            manifest.odd_hash = manifest.odd_hash.or(existing.odd_hash);
        }
        self.write_manifest(&manifest)?;
        Ok(manifest)
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<()> {
        let path = self.run_dir(&manifest.run_id).join("manifest.json");
        json::write_atomic(&path, json::to_pretty_string(manifest)?.as_bytes())
    }

    pub fn manifest(&self, run_id: &str) -> Result<RunManifest> {
        let dir = self.require_run(run_id)?;
        json::read_json(&dir.join("manifest.json"))
    }

    pub fn list_runs(&self) -> Result<Vec<RunManifest>> {
        let runs = self.root.join("runs");
        let mut ids: Vec<String> = std::fs::read_dir(&runs)
            .map_err(|e| Error::io(&runs, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|id| self.has_run(id))
            .collect();
        ids.sort();
        ids.iter().map(|id| self.manifest(id)).collect()
    }

    pub fn report_path(&self, run_id: &str, name: &str) -> PathBuf {
        self.run_dir(run_id).join("reports").join(format!("{name}.json"))
    }

    /// Writes `reports/<name>.json` atomically in canonical form.
    pub fn persist_report<T: Serialize>(&self, run_id: &str, name: &str, report: &T) -> Result<PathBuf> {
        self.require_run(run_id)?;
        check_name(name)?;
        let path = self.report_path(run_id, name);
        json::write_atomic(&path, json::to_pretty_string(report)?.as_bytes())?;
        Ok(path)
    }

    pub fn load_report<T: DeserializeOwned>(&self, run_id: &str, name: &str) -> Result<T> {
        self.require_run(run_id)?;
        check_name(name)?;
        json::read_json(&self.report_path(run_id, name))
    }

    pub fn has_report(&self, run_id: &str, name: &str) -> bool {
        valid_name(name) && self.has_run(run_id) && self.report_path(run_id, name).is_file()
    }

    /// Writes an arbitrary artifact below the run directory.
    pub fn write_artifact(&self, run_id: &str, relative: &str, bytes: &[u8]) -> Result<PathBuf> {
        let dir = self.require_run(run_id)?;
        if relative.split('/').any(|p| !valid_name(p)) {
            return Err(Error::Config(format!("invalid artifact path '{relative}'")));
        }
        let path = dir.join(relative);
        json::write_atomic(&path, bytes)?;
        Ok(path)
    }

    pub fn read_artifact(&self, run_id: &str, relative: &str) -> Result<Vec<u8>> {
        let dir = self.require_run(run_id)?;
        if relative.split('/').any(|p| !valid_name(p)) {
            return Err(Error::Config(format!("invalid artifact path '{relative}'")));
        }
        let path = dir.join(relative);
        std::fs::read(&path).map_err(|e| Error::io(path, e))
    }

    pub fn export_compliance_csv(&self, run_id: &str, report: &crate::sweep::ComplianceReport) -> Result<PathBuf> {
        self.write_artifact(run_id, "reports/compliance.csv", report.to_csv()?.as_bytes())
    }

    /// Adds samples that verdicts may reference.
    pub fn register_samples(&self, run_id: &str, keys: impl IntoIterator<Item = SampleKey>) -> Result<()> {
        let dir = self.require_run(run_id)?;
        let _guard = self.verdict_lock.lock().expect("store lock poisoned");
        let mut known = self.samples(run_id)?;
        known.extend(keys);
        let list: Vec<&SampleKey> = known.iter().collect();
        json::write_atomic(&dir.join("samples.json"), json::to_pretty_string(&list)?.as_bytes())
    }

    pub fn samples(&self, run_id: &str) -> Result<BTreeSet<SampleKey>> {
        let path = self.require_run(run_id)?.join("samples.json");
        if !path.exists() {
            return Ok(BTreeSet::new());
        }
        let list: Vec<SampleKey> = json::read_json(&path)?;
        Ok(list.into_iter().collect())
    }

    /// Appends a verdict; it supersedes earlier verdicts on the same sample.
    pub fn record_verdict(&self, verdict: &Verdict) -> Result<VerdictAck> {
        let dir = self.require_run(&verdict.run_id)?;
        let key = SampleKey {
            scene_id: verdict.scene_id.clone(),
            sample: verdict.sample.clone(),
        };
        if !self.samples(&verdict.run_id)?.contains(&key) {
            return Err(Error::UnknownSample {
                run: verdict.run_id.clone(),
                scene: key.scene_id,
                sample: key.sample,
            });
        }
        let _guard = self.verdict_lock.lock().expect("store lock poisoned");
        let path = dir.join("verdicts.ndjson");
        let mut line = serde_json::to_string(verdict)?;
        line.push('\n');
        let torn_tail = std::fs::read(&path)
            .map(|b| b.last().is_some_and(|&c| c != b'\n'))
            .unwrap_or(false);
        if torn_tail {
            line.insert(0, '\n');
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;
        f.sync_all().map_err(|e| Error::io(&path, e))?;
        drop(f);
        let history_len = self
            .verdict_log(&verdict.run_id)?
            .iter()
            .filter(|v| v.scene_id == verdict.scene_id && v.sample == verdict.sample)
            .count();
        Ok(VerdictAck {
            effective: verdict.clone(),
            history_len,
        })
    }

    /// Full verdict history in log order. A torn trailing line is skipped.
    pub fn verdict_log(&self, run_id: &str) -> Result<Vec<Verdict>> {
        let path = self.require_run(run_id)?.join("verdicts.ndjson");
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        // Lines that do not parse are interrupted appends.
        Ok(text
            .split('\n')
            .filter(|l| !l.trim().is_empty())
            .filter_map(|l| serde_json::from_str(l).ok())
            .collect())
    }

    pub fn effective_verdicts(&self, run_id: &str) -> Result<VerdictSet> {
        Ok(VerdictSet::from_log(&self.verdict_log(run_id)?))
    }
}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s != "."
        && s != ".."
        && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_.:".contains(c))
}

fn check_name(s: &str) -> Result<()> {
    if valid_name(s) {
        Ok(())
    } else {
        Err(Error::Config(format!("invalid report name '{s}'")))
    }
}
