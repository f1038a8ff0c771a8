//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Criteria 8 to 11 drive the `oddforge` binary against a synthetic rail
//! dataset written by `oddforge demo-data`.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;

use oddforge_core::eval::confusion_accumulate;
use oddforge_core::fixtures::{palette, rail_scene, Weather};
use oddforge_core::render::{render, render_transition, RenderParams};
use oddforge_core::scene::{read_mask_png, DEFAULT_MIN_AREA};
use oddforge_core::style::{
    cluster_styles, encode_region, encode_scene, kmeans, KMeansParams, StyleEntry, StyleSpace,
};
use oddforge_core::sweep::{detect_drops, CellStatus, FlagKind, SuiteManifest, ORIGINAL};
use oddforge_core::{
    iou_from_matrix, CategoryRegistry, ComplianceReport, Scene, SceneImage, SemanticMask, StyleAssignment,
    StyleVector, SuiteResults,
};

const RUNTIME_LIMIT: Duration = Duration::from_secs(5);
const CENTER_TOL: f64 = 0.02;
const ROUNDTRIP_MEAN_TOL: f64 = 0.02;
const ROUNDTRIP_STD_TOL: f64 = 0.05;
const DROP_THRESHOLD: f64 = 0.3;
const NIGHT_OBJECT_DROP: f64 = 0.3;
const SSE_TOL: f64 = 1e-9;
/// Minimum IoU of the strict ODD used for the exit-code fixtures.
const STRICT_THRESHOLD: f64 = 0.95;
const OBJECT_CATEGORIES: [&str; 4] = ["rail-track", "on-rail", "car", "human"];
const CONDITIONS: [&str; 4] = ["cloudy", "sunny", "night", "snow"];

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
type DropCase = (&'static str, [f64; 4], &'static [(usize, FlagKind)]);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let fixture = catch_unwind(Fixture::build);
    let criteria: Vec<(u32, &str, Check)> = vec![
        (1, "IoU matches brute-force counting", Box::new(iou_oracle)),
        (2, "hand-computed IoU case", Box::new(iou_hand_case)),
        (3, "k-means recovers three blobs", Box::new(kmeans_blobs)),
        (4, "k-means matches exhaustive partitions", Box::new(kmeans_exhaustive)),
        (5, "encode/render roundtrip", Box::new(encode_render_roundtrip)),
        (6, "transition endpoints", Box::new(transition_endpoints)),
        (7, "drop patterns", Box::new(drop_patterns)),
        (8, "suite shape", Box::new(|| with_fixture(&fixture, suite_shape))),
        (9, "degradation under night and snow", Box::new(|| with_fixture(&fixture, degradation))),
        (10, "pipeline determinism and exit codes", Box::new(|| with_fixture(&fixture, determinism))),
        (11, "verdict exclusion", Box::new(|| with_fixture(&fixture, verdict_exclusion))),
    ];
    let mut failed = 0;
    for (n, name, check) in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| Err(panic_text(p)));
        let elapsed = start.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{elapsed:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why} [{elapsed:.2?}]");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn with_fixture(
    fixture: &std::thread::Result<Fixture>,
    check: fn(&Fixture) -> Outcome,
) -> Outcome {
    match fixture {
        Ok(f) => check(f),
        Err(p) => Err(format!(
            "fixture setup failed: {}",
            p.downcast_ref::<String>().map_or("panic", |s| s.as_str())
        )),
    }
}

// ---------------------------------------------------------------- criterion 1

fn iou_oracle() -> Outcome {
    let start = Instant::now();
    let registry = CategoryRegistry::railsem19();
    let ignore = registry.ignore_id();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut compared = 0;
    for pair in 0..200 {
        let gt: Vec<u8> = (0..256)
            .map(|_| if rng.random_bool(0.05) { ignore } else { rng.random_range(0..19) })
            .collect();
        let pred: Vec<u8> = (0..256).map(|_| rng.random_range(0..19)).collect();
        let m = confusion_accumulate(
            &SemanticMask::new(16, 16, gt.clone()).unwrap(),
            &SemanticMask::new(16, 16, pred.clone()).unwrap(),
            &registry,
        )
        .map_err(|e| e.to_string())?;
        let report = iou_from_matrix(&m);
        let mut present = Vec::new();
        for c in 0..19u8 {
            let scored = || gt.iter().zip(&pred).filter(|(&g, _)| g != ignore);
            let inter = scored().filter(|(&g, &p)| g == c && p == c).count() as u64;
            let union = scored().filter(|(&g, &p)| g == c || p == c).count() as u64;
            let expected = (union > 0).then(|| inter as f64 / union as f64);
            let got = &report.categories[usize::from(c)];
            ensure!(
                got.intersection == inter && got.union == union && got.iou == expected,
                "pair {pair} category {c}: got {}/{} {:?}, expected {inter}/{union} {expected:?}",
                got.intersection,
                got.union,
                got.iou
            );
            present.extend(expected);
            compared += 1;
        }
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        ensure!(report.mean_iou == Some(mean), "pair {pair}: mean {:?} vs {mean}", report.mean_iou);
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < RUNTIME_LIMIT, "took {elapsed:.2?}");
    Ok(format!("{compared} category scores equal exactly, {elapsed:.2?} < {RUNTIME_LIMIT:?}"))
}

// ---------------------------------------------------------------- criterion 2

fn iou_hand_case() -> Outcome {
    let registry = CategoryRegistry::railsem19();
    let gt = SemanticMask::new(4, 1, vec![0, 0, 1, 1]).unwrap();
    let pred = SemanticMask::new(4, 1, vec![0, 1, 1, 1]).unwrap();
    let report = iou_from_matrix(&confusion_accumulate(&gt, &pred, &registry).map_err(|e| e.to_string())?);
    let ratio = |c: usize| {
        let s = &report.categories[c];
        Ratio::new(s.intersection, s.union)
    };
    ensure!(ratio(0) == Ratio::new(1, 2), "category 0 IoU {}", ratio(0));
    ensure!(ratio(1) == Ratio::new(2, 3), "category 1 IoU {}", ratio(1));
    let present: Vec<Ratio<u64>> = report
        .categories
        .iter()
        .filter(|s| s.union > 0)
        .map(|s| Ratio::new(s.intersection, s.union))
        .collect();
    let mean = present.iter().sum::<Ratio<u64>>() / Ratio::from_integer(present.len() as u64);
    ensure!(mean == Ratio::new(7, 12), "rational mean {mean}");
    let float = report.mean_iou.ok_or("no mean")?;
    ensure!((float - 7.0 / 12.0).abs() <= f64::EPSILON, "float mean {float}");
    Ok(format!("IoU (1/2, 2/3), mean {mean}"))
}

// ---------------------------------------------------------------- criterion 3

fn blob_space(means: &[[f64; 6]], per_blob: usize, sigma: f64, seed: u64) -> StyleSpace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut entries = Vec::new();
    for (b, mean) in means.iter().enumerate() {
        for i in 0..per_blob {
            entries.push(StyleEntry {
                scene_id: format!("blob{b}_{i:02}"),
                region_id: 1,
                category_id: 10,
                style: StyleVector::new(mean.iter().map(|m| m + noise.sample(&mut rng)).collect()),
            });
        }
    }
    StyleSpace { entries }
}

fn kmeans_blobs() -> Outcome {
    let start = Instant::now();
    let means = [
        [0.20, 0.30, 0.60, 0.05, 0.05, 0.05],
        [0.70, 0.70, 0.75, 0.10, 0.10, 0.10],
        [0.05, 0.05, 0.12, 0.02, 0.02, 0.02],
    ];
    let space = blob_space(&means, 50, 0.01, 3);
    let params = KMeansParams::new(3, 42);
    let a = cluster_styles(&space, &params).map_err(|e| e.to_string())?;
    let b = cluster_styles(&space, &params).map_err(|e| e.to_string())?;
    let (ja, jb) = (a.to_json().unwrap(), b.to_json().unwrap());
    ensure!(ja == jb, "catalog bytes differ between runs");
    let clusters = &a.category(10).ok_or("sky missing from catalog")?.clusters;
    ensure!(clusters.len() == 3, "{} clusters", clusters.len());
    let mut matched = BTreeSet::new();
    let mut worst: f64 = 0.0;
    for mean in &means {
        let (idx, dist) = clusters
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.center.distance_sq(&StyleVector::new(mean.to_vec())).sqrt()))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        ensure!(dist <= CENTER_TOL, "blob {mean:?} nearest center at {dist:.4}");
        ensure!(matched.insert(idx), "two blobs share center {idx}");
        worst = worst.max(dist);
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < RUNTIME_LIMIT, "took {elapsed:.2?}");
    Ok(format!(
        "max center error {worst:.4} <= {CENTER_TOL}, identical {} catalog bytes, {elapsed:.2?}",
        ja.len()
    ))
}

// ---------------------------------------------------------------- criterion 4

fn exhaustive_sse(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    'outer: loop {
        if (0..k).all(|c| labels.contains(&c)) {
            let mut total = 0.0;
            for c in 0..k {
                let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                let dim = members[0].len();
                let centroid: Vec<f64> = (0..dim)
                    .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64)
                    .collect();
                total += members
                    .iter()
                    .map(|p| p.iter().zip(&centroid).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .sum::<f64>();
            }
            best = best.min(total);
        }
        for l in labels.iter_mut() {
            *l += 1;
            if *l < k {
                continue 'outer;
            }
            *l = 0;
        }
        return best;
    }
}

fn kmeans_exhaustive() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut fixtures = 0;
    let mut worst: f64 = 0.0;
    for n in 1..=8usize {
        for k in 1..=3usize.min(n) {
            for rep in 0..5 {
                let dim = 1 + rep % 3;
                let points: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect();
                let got = kmeans(&points, 0, &KMeansParams::new(k, 1000 + fixtures)).sse;
                let optimum = exhaustive_sse(&points, k);
                let gap = got - optimum;
                ensure!(gap.abs() <= SSE_TOL, "n={n} k={k} dim={dim}: SSE {got} vs optimum {optimum}");
                worst = worst.max(gap.abs());
                fixtures += 1;
            }
        }
    }
    Ok(format!("{fixtures} fixtures, max SSE gap {worst:.1e}"))
}

// ---------------------------------------------------------------- criterion 5

fn encode_render_roundtrip() -> Outcome {
    let registry = CategoryRegistry::railsem19();
    let labels: Vec<u8> = (0..64 * 64)
        .map(|i| {
            let (x, y) = (i % 64, i / 64);
            [8, 9, 10, 15][(x / 32 + 2 * (y / 32)) as usize]
        })
        .collect();
    let mask = SemanticMask::new(64, 64, labels).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_mean, mut worst_std): (f64, f64) = (0.0, 0.0);
    let mut styles_checked = 0;
    for image_index in 0..5u64 {
        let scene = Scene::from_parts(
            "roundtrip",
            SceneImage::filled(64, 64, [0.0; 3]).unwrap(),
            mask.clone(),
            &registry,
            DEFAULT_MIN_AREA,
        )
        .map_err(|e| e.to_string())?;
        ensure!(scene.regions.len() == 4, "{} regions", scene.regions.len());
        let assigned: BTreeMap<u32, StyleVector> = scene
            .regions
            .iter()
            .map(|r| {
                let mean = [0; 3].map(|_| rng.random_range(0.2..0.8));
                let std = [0; 3].map(|_| rng.random_range(0.0..0.1));
                (r.region_id, StyleVector::from_mean_std(mean, std))
            })
            .collect();
        let image = render(&mask, &scene.regions, &StyleAssignment(assigned.clone()), &RenderParams::new(image_index))
            .map_err(|e| e.to_string())?;
        let decoded = SceneImage::from_rgb8(&image.to_rgb8());
        for r in &scene.regions {
            ensure!(r.area() >= 1024, "region {} has {} px", r.region_id, r.area());
            let got = encode_region(&decoded, r).map_err(|e| e.to_string())?;
            let want = &assigned[&r.region_id];
            for c in 0..3 {
                let dm = (got.mean()[c] - want.mean()[c]).abs();
                let ds = (got.std()[c] - want.std()[c]).abs();
                ensure!(dm <= ROUNDTRIP_MEAN_TOL, "mean error {dm:.4} on region {}", r.region_id);
                ensure!(ds <= ROUNDTRIP_STD_TOL, "std error {ds:.4} on region {}", r.region_id);
                worst_mean = worst_mean.max(dm);
                worst_std = worst_std.max(ds);
            }
            styles_checked += 1;
        }
    }
    ensure!(styles_checked == 20, "{styles_checked} styles checked");
    Ok(format!(
        "{styles_checked} styles through PNG, max mean error {worst_mean:.4} <= {ROUNDTRIP_MEAN_TOL}, max std error {worst_std:.4} <= {ROUNDTRIP_STD_TOL}"
    ))
}

// ---------------------------------------------------------------- criterion 6

fn transition_endpoints() -> Outcome {
    let registry = CategoryRegistry::railsem19();
    let (image, mask) = rail_scene(4, Weather::Sunny);
    let scene = Scene::from_parts("s", image, mask, &registry, DEFAULT_MIN_AREA).map_err(|e| e.to_string())?;
    let a = encode_scene(&scene).map_err(|e| e.to_string())?;
    let b = StyleAssignment(
        scene
            .regions
            .iter()
            .map(|r| {
                let (mean, std) = palette(r.category_id, Weather::Night);
                (r.region_id, StyleVector::from_mean_std(mean, [std; 3]))
            })
            .collect(),
    );
    let params = RenderParams::new(17);
    let mut checked = Vec::new();
    for steps in [2, 4, 7] {
        let frames = render_transition(&scene, &a, &b, steps, &params).map_err(|e| e.to_string())?;
        let direct_a = render(&scene.mask, &scene.regions, &a, &params).unwrap().to_png();
        let direct_b = render(&scene.mask, &scene.regions, &b, &params).unwrap().to_png();
        ensure!(frames[0].to_png() == direct_a, "lambda 0 frame differs (steps {steps})");
        ensure!(frames[steps - 1].to_png() == direct_b, "lambda 1 frame differs (steps {steps})");
        if steps > 2 {
            ensure!(frames[1].to_png() != direct_a, "interior frame equals the start (steps {steps})");
        }
        checked.push(steps);
    }
    Ok(format!("byte-identical endpoints for steps {checked:?}"))
}

// ---------------------------------------------------------------- criterion 7

fn drop_patterns() -> Outcome {
    let cases: [DropCase; 3] = [
        ("on-rail to night", [0.89, 0.90, 0.0, 0.0], &[(1, FlagKind::Drop)]),
        (
            "rail-track to night",
            [0.95, 0.01, 0.06, 0.91],
            &[(0, FlagKind::Drop), (2, FlagKind::Recovery)],
        ),
        ("rail-track to snow", [0.93, 0.93, 0.26, 0.10], &[(1, FlagKind::Drop)]),
    ];
    for (name, series, want) in cases {
        let got: Vec<(usize, FlagKind)> = detect_drops(&series, DROP_THRESHOLD)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|f| (f.step, f.kind))
            .collect();
        ensure!(got == want, "{name} {series:?}: flags {got:?}, expected {want:?}");
    }
    Ok(format!("3 series flagged as expected at threshold {DROP_THRESHOLD}"))
}

// ---------------------------------------------------------------- CLI fixture

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    demo: PathBuf,
    builtin: PathBuf,
    oracle_pass: PathBuf,
    oracle_fail: PathBuf,
}

struct CliRun {
    code: i32,
    stdout: String,
    stderr: String,
}

fn oddforge(config: &Path, store: &Path, args: &[&str]) -> CliRun {
    let out = Command::new(env!("CARGO_BIN_EXE_oddforge"))
        .arg("--config")
        .arg(config)
        .arg("--store")
        .arg(store)
        .args(args)
        .env_remove("ODDFORGE_STORE")
        .output()
        .expect("oddforge binary runs");
    CliRun {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn must(config: &Path, store: &Path, args: &[&str]) -> CliRun {
    let r = oddforge(config, store, args);
    assert_eq!(r.code, 0, "oddforge {args:?} exited {}: {}", r.code, r.stderr);
    r
}

/// Runs encode, cluster and suite and returns the run directory.
fn pipeline(config: &Path, store: &Path) -> PathBuf {
    for stage in ["encode", "cluster", "suite"] {
        must(config, store, &[stage]);
    }
    run_dir(config, store)
}

fn run_dir(config: &Path, store: &Path) -> PathBuf {
    let v: Value = serde_json::from_str(&must(config, store, &["--json", "validate"]).stdout).unwrap();
    PathBuf::from(v["run_dir"].as_str().unwrap())
}

fn read_report<T: serde::de::DeserializeOwned>(run_dir: &Path, name: &str) -> T {
    let path = run_dir.join("reports").join(format!("{name}.json"));
    serde_json::from_slice(&std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

impl Fixture {
    fn build() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let demo = root.join("demo");
        let r = oddforge(Path::new("unused.json"), &root.join("unused"), &[
            "demo-data",
            "--out",
            demo.to_str().unwrap(),
            "--scenes",
            "5",
            "--per-weather",
            "3",
        ]);
        assert_eq!(r.code, 0, "demo-data: {}", r.stderr);
        let builtin = demo.join("oddforge.json");

        // Strict ODD: the default conditions with a high IoU threshold.
        let bootstrap = root.join("bootstrap");
        must(&builtin, &bootstrap, &["encode"]);
        must(&builtin, &bootstrap, &["cluster"]);
        let odd = demo.join("strict_odd.json");
        must(&builtin, &bootstrap, &["init-odd", "--out", odd.to_str().unwrap()]);
        let mut spec: Value = serde_json::from_slice(&std::fs::read(&odd).unwrap()).unwrap();
        spec["default_threshold"] = STRICT_THRESHOLD.into();
        std::fs::write(&odd, serde_json::to_vec_pretty(&spec).unwrap()).unwrap();

        // Oracle model: copies each scene's ground truth, except that the
        // sample named by $2 gets the mask of scene $3.
        let script = root.join("oracle.sh");
        std::fs::write(
            &script,
            r#"#!/bin/sh
masks="$1"; corrupt="$2"; decoy="$3"; shift 3
while [ $# -gt 0 ]; do case "$1" in --input) in="$2"; shift 2;; --output) out="$2"; shift 2;; *) shift;; esac; done
for f in "$in"/*.png; do
  b=$(basename "$f" .png); src="${b%%__*}"
  if [ "$b" = "$corrupt" ]; then src="$decoy"; fi
  cp "$masks/$src.png" "$out/$b.png" || exit 1
done
"#,
        )
        .unwrap();
        let base: Value = serde_json::from_slice(&std::fs::read(&builtin).unwrap()).unwrap();
        let oracle_config = |name: &str, corrupt: &str| {
            let mut c = base.clone();
            c["odd"] = "strict_odd.json".into();
            c["adapter"] = serde_json::json!({
                "kind": "external-command",
                "command": ["sh", script, demo.join("test/masks"), corrupt, "scene_02"],
                "timeout_secs": 60,
            });
            let path = demo.join(name);
            std::fs::write(&path, serde_json::to_vec_pretty(&c).unwrap()).unwrap();
            path
        };
        let oracle_pass = oracle_config("oracle_pass.json", "none");
        let oracle_fail = oracle_config("oracle_fail.json", "scene_01__night");
        Fixture {
            _dir: dir,
            root,
            demo,
            builtin,
            oracle_pass,
            oracle_fail,
        }
    }

    fn store(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

// ---------------------------------------------------------------- criterion 8

fn suite_shape(f: &Fixture) -> Outcome {
    let registry = CategoryRegistry::railsem19();
    let masks_dir = f.demo.join("test/masks");
    let snapshot = |dir: &Path| -> BTreeMap<String, Vec<u8>> {
        std::fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
            })
            .collect()
    };
    let before = snapshot(&masks_dir);
    let run = pipeline(&f.oracle_pass, &f.store("c8"));
    ensure!(snapshot(&masks_dir) == before, "ground-truth masks changed on disk");

    let odd: Value = serde_json::from_slice(&std::fs::read(run.join("odd.json")).unwrap()).unwrap();
    let conditions: Vec<&str> = odd["conditions"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    ensure!(conditions == CONDITIONS, "ODD conditions {conditions:?}");

    let manifest: SuiteManifest = read_report(&run, "suite_manifest");
    let originals = manifest.variants.iter().filter(|v| v.condition == ORIGINAL).count();
    let edited = manifest.variants.len() - originals;
    ensure!(originals == 5 && edited == 20, "{originals} originals and {edited} variants");
    let mut per_scene: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for v in &manifest.variants {
        per_scene.entry(&v.scene_id).or_default().insert(&v.condition);
    }
    let expected: BTreeSet<&str> = std::iter::once(ORIGINAL).chain(CONDITIONS).collect();
    ensure!(per_scene.len() == 5 && per_scene.values().all(|c| *c == expected), "per-scene conditions {per_scene:?}");

    // Every variant keeps the region layout of its scene's ground truth.
    for v in &manifest.variants {
        let mask = read_mask_png(&masks_dir.join(format!("{}.png", v.scene_id)), &registry).unwrap();
        let scene = Scene::from_parts(&v.scene_id, SceneImage::filled(mask.width(), mask.height(), [0.0; 3]).unwrap(), mask, &registry, DEFAULT_MIN_AREA).unwrap();
        let regions: BTreeSet<u32> = scene.regions.iter().map(|r| r.region_id).collect();
        let styled: BTreeSet<u32> = v.styles.region_ids().collect();
        ensure!(regions == styled, "{}/{} styles regions {styled:?}, gt has {regions:?}", v.scene_id, v.condition);
        ensure!(run.join(format!("renders/{}_{}.png", v.scene_id, v.condition)).is_file(), "render missing");
    }

    // A model answering with the ground truth scores exactly 1 on every
    // variant, so every variant was scored against its scene's unchanged mask.
    let results: SuiteResults = read_report(&run, "suite");
    ensure!(results.samples.len() == 25, "{} scored samples", results.samples.len());
    for s in &results.samples {
        let mean = s.report.as_ref().and_then(|r| r.mean_iou);
        ensure!(mean == Some(1.0), "{}/{} oracle mean IoU {mean:?}", s.scene_id, s.condition);
    }
    Ok("5 originals + 20 variants over 4 conditions; gt unchanged, oracle IoU 1 on all 25".into())
}

// ---------------------------------------------------------------- criterion 9

fn degradation(f: &Fixture) -> Outcome {
    let registry = CategoryRegistry::railsem19();
    let run = pipeline(&f.builtin, &f.store("c9"));
    let results: SuiteResults = read_report(&run, "suite");
    let agg = |c: &str| results.condition(c).map(|r| &r.aggregate).ok_or(format!("no {c} results"));
    let mean = |c: &str| agg(c).and_then(|a| a.mean_iou.ok_or(format!("no {c} mean")));
    let (orig, night, snow) = (mean(ORIGINAL)?, mean("night")?, mean("snow")?);
    ensure!(night < orig, "night {night:.3} >= original {orig:.3}");
    ensure!(snow < orig, "snow {snow:.3} >= original {orig:.3}");
    let (o, n) = (agg(ORIGINAL)?, agg("night")?);
    let (name, drop) = OBJECT_CATEGORIES
        .iter()
        .filter_map(|name| {
            let id = registry.resolve(name).ok()?;
            Some((*name, o.iou(id)? - n.iou(id).unwrap_or(0.0)))
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or("no object category scored")?;
    ensure!(drop >= NIGHT_OBJECT_DROP, "largest object drop under night is {name} {drop:.3}");
    Ok(format!(
        "mean IoU original {orig:.3}, night {night:.3}, snow {snow:.3}; {name} drops {drop:.3} under night"
    ))
}

// --------------------------------------------------------------- criterion 10

fn comply(config: &Path, store: &Path) -> (i32, ComplianceReport, Vec<u8>) {
    let r = oddforge(config, store, &["comply"]);
    assert!(matches!(r.code, 0 | 2 | 3), "comply exited {}: {}", r.code, r.stderr);
    let path = run_dir(config, store).join("reports/compliance.json");
    let bytes = std::fs::read(&path).unwrap();
    (r.code, serde_json::from_slice(&bytes).unwrap(), bytes)
}

fn determinism(f: &Fixture) -> Outcome {
    let mut reports = Vec::new();
    for store in ["c10a", "c10b"] {
        let run = pipeline(&f.builtin, &f.store(store));
        let (_, _, bytes) = comply(&f.builtin, &f.store(store));
        reports.push((run, bytes));
    }
    ensure!(reports[0].1 == reports[1].1, "compliance reports differ between runs");
    for artifact in ["catalog.json", "style_space.json", "reports/suite.json", "odd.json"] {
        let a = std::fs::read(reports[0].0.join(artifact)).unwrap();
        let b = std::fs::read(reports[1].0.join(artifact)).unwrap();
        ensure!(a == b, "{artifact} differs between runs");
    }
    // Re-running over an existing run directory reproduces the same bytes.
    pipeline(&f.builtin, &f.store("c10a"));
    let (_, _, again) = comply(&f.builtin, &f.store("c10a"));
    ensure!(again == reports[0].1, "re-run changed the compliance report");

    let (pass, report, _) = comply_after_pipeline(&f.oracle_pass, &f.store("c10-pass"));
    ensure!(pass == 0, "all-pass fixture exited {pass} ({:?})", report.overall);
    let (fail, report, _) = comply_after_pipeline(&f.oracle_fail, &f.store("c10-fail"));
    ensure!(fail == 2, "failing fixture exited {fail} ({:?})", report.overall);
    let store = f.store("c10-insufficient");
    pipeline(&f.oracle_pass, &store);
    for scene in 1..=5 {
        must(&f.oracle_pass, &store, &["verdict", "--scene", &format!("scene_{scene:02}"), "--sample", "snow", "--reject", "--reason", "artifacts"]);
    }
    let (insufficient, report, _) = comply(&f.oracle_pass, &store);
    ensure!(insufficient == 3, "insufficient fixture exited {insufficient} ({:?})", report.overall);
    Ok(format!(
        "{} byte-identical compliance bytes across 3 runs; exit codes pass 0, fail 2, insufficient 3",
        reports[0].1.len()
    ))
}

fn comply_after_pipeline(config: &Path, store: &Path) -> (i32, ComplianceReport, Vec<u8>) {
    pipeline(config, store);
    comply(config, store)
}

// --------------------------------------------------------------- criterion 11

fn verdict_exclusion(f: &Fixture) -> Outcome {
    let registry = CategoryRegistry::railsem19();
    let store = f.store("c11");
    pipeline(&f.oracle_fail, &store);
    let (code, before, _) = comply(&f.oracle_fail, &store);
    ensure!(code == 2, "corrupted run exited {code}");
    let failing: Vec<_> = before.cells.iter().filter(|c| c.status == CellStatus::Fail).collect();
    ensure!(!failing.is_empty(), "no failing cell before the verdict");
    ensure!(
        failing.iter().all(|c| c.condition == "night"),
        "failing cells outside night: {:?}",
        failing.iter().map(|c| (&c.condition, &c.category)).collect::<Vec<_>>()
    );

    let r = must(&f.oracle_fail, &store, &[
        "verdict", "--scene", "scene_01", "--sample", "night", "--reject", "--reason", "wrong mask", "--author", "qa",
    ]);
    ensure!(r.stdout.contains("rejected"), "verdict output: {}", r.stdout);
    let (code, after, _) = comply(&f.oracle_fail, &store);
    ensure!(code == 0, "after rejecting the failing variant comply exited {code}");

    // The remaining night samples are exact predictions, so every category
    // present in their ground truth scores 1 and the rest are unscored.
    let mut present = BTreeSet::new();
    for scene in 2..=5 {
        let mask = read_mask_png(&f.demo.join(format!("test/masks/scene_{scene:02}.png")), &registry).unwrap();
        present.extend(mask.labels().iter().copied().filter(|&l| l != registry.ignore_id()));
    }
    for cell in after.cells.iter().filter(|c| c.condition == "night") {
        let (want_iou, want_status) = if present.contains(&cell.category_id) {
            (Some(1.0), CellStatus::Pass)
        } else {
            (None, CellStatus::NotScored)
        };
        ensure!(
            cell.iou == want_iou && cell.status == want_status,
            "night/{}: {:?} {:?}, expected {want_iou:?} {want_status:?}",
            cell.category,
            cell.iou,
            cell.status
        );
    }
    for cell in after.cells.iter().filter(|c| c.condition != "night") {
        ensure!(before.cell(&cell.condition, cell.category_id) == Some(cell), "{}/{} changed", cell.condition, cell.category);
    }
    let flipped = failing.len();

    for scene in 2..=5 {
        must(&f.oracle_fail, &store, &["verdict", "--scene", &format!("scene_{scene:02}"), "--sample", "night", "--reject"]);
    }
    let (code, none_left, _) = comply(&f.oracle_fail, &store);
    ensure!(code == 3, "with every night variant rejected comply exited {code}");
    ensure!(
        none_left
            .cells
            .iter()
            .filter(|c| c.condition == "night")
            .all(|c| c.status == CellStatus::InsufficientEvidence && c.iou.is_none()),
        "night cells are not all insufficient evidence"
    );
    let summary = none_left.conditions.iter().find(|c| c.condition == "night").ok_or("no night summary")?;
    ensure!(summary.insufficient_evidence && summary.excluded == 5, "night summary {summary:?}");
    Ok(format!(
        "{flipped} failing night cells recomputed to the oracle values; all-rejected night is insufficient evidence"
    ))
}
