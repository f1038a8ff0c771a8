//! `oddforge` command-line driver.
//!
//! Every pipeline command derives its run from the config file, so running
//! `encode`, `cluster`, `suite` and `comply` in sequence with the same config
//! operates on one run directory.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use oddforge_core::config::STORE_ENV;
use oddforge_core::fixtures::write_demo;
use oddforge_core::json::read_json;
use oddforge_core::pipeline::{configure_threads, Prototype};
use oddforge_core::store::Store;
use oddforge_core::sweep::FlagKind;
use oddforge_core::{Config, Error, OddSpec, VerdictKind, Workspace};
use oddforge_service::{serve_blocking, AppState, DEFAULT_ADDR};

#[derive(Debug, Parser)]
#[command(name = "oddforge", version, about = "Scenario-based ODD validation of segmentation models")]
struct Cli {
    /// Harness config file.
    #[arg(long, global = true, default_value = "oddforge.json")]
    config: PathBuf,
    /// Print a JSON summary instead of a text line.
    #[arg(long, global = true)]
    json: bool,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Config overrides. Changing any of these defines a different run.
#[derive(Debug, Args)]
struct Overrides {
    /// Run store directory (also `ODDFORGE_STORE`).
    #[arg(long, global = true, env = STORE_ENV)]
    store: Option<PathBuf>,
    /// Clusters per category.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    cluster_seed: Option<u64>,
    #[arg(long, global = true)]
    render_seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the config and show the run it maps to.
    Validate,
    /// Encode every region of the style dataset into the style space.
    Encode,
    /// Cluster the style space per category into the style catalog.
    Cluster,
    /// Attach a concept name to a catalog cluster.
    Label(LabelArgs),
    /// Render the condition suite and score it.
    Suite,
    /// Interpolate one scene between two conditions and flag IoU drops.
    Sweep(SweepArgs),
    /// Evaluate ODD compliance; exits 0 on pass, 2 on fail, 3 on insufficient evidence.
    Comply,
    /// Accept or reject a synthesized sample.
    Verdict(VerdictArgs),
    /// Write the effective ODD spec to a file for editing.
    InitOdd {
        #[arg(long)]
        out: PathBuf,
    },
    /// List the runs in the store.
    Runs,
    /// Serve the audit API.
    Serve {
        #[arg(long, default_value = DEFAULT_ADDR)]
        addr: SocketAddr,
        /// Directory with a built auditor UI to serve at `/`.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// Write a synthetic rail dataset and a config that uses it.
    DemoData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        scenes: usize,
        #[arg(long, default_value_t = 3)]
        per_weather: usize,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = true)]
struct LabelArgs {
    /// Category name or id.
    #[arg(long, requires_all = ["cluster", "concept"], conflicts_with = "prototypes")]
    category: Option<String>,
    /// Cluster index within the category.
    #[arg(long, requires = "category")]
    cluster: Option<usize>,
    #[arg(long, requires = "category")]
    concept: Option<String>,
    /// Label the nearest cluster for each prototype in this JSON file.
    #[arg(long)]
    prototypes: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    scene: String,
    /// Condition name, or `original`.
    #[arg(long, default_value = "original")]
    from: String,
    #[arg(long)]
    to: String,
    #[arg(long)]
    steps: Option<usize>,
    /// Category whose IoU is tracked; defaults to the config's focus.
    #[arg(long)]
    focus: Option<String>,
}

#[derive(Debug, Args)]
struct VerdictArgs {
    #[arg(long)]
    scene: String,
    /// Condition name or `sweep:<from>:<to>:<step>`.
    #[arg(long)]
    sample: String,
    #[arg(long, conflicts_with = "reject", required_unless_present = "reject")]
    accept: bool,
    #[arg(long)]
    reject: bool,
    #[arg(long, default_value = "")]
    reason: String,
    #[arg(long, default_value = "")]
    author: String,
}

/// What a command prints and how the process exits.
struct Outcome {
    line: String,
    summary: Value,
    code: u8,
}

impl Outcome {
    fn ok(line: String, summary: Value) -> Self {
        Self { line, summary, code: 0 }
    }
}

fn main() -> ExitCode {
    // Usage errors exit 1 so that 2 and 3 stay reserved for compliance outcomes.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(out) => {
            if cli.json {
                println!("{}", out.summary);
            } else {
                println!("{}", out.line);
            }
            ExitCode::from(out.code)
        }
        Err(e) => {
            if cli.json {
                println!("{}", json!({ "error": e.to_string() }));
            }
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> oddforge_core::Result<Config> {
    let mut config = Config::load(&cli.config)?;
    let o = &cli.overrides;
    if let Some(s) = &o.store {
        config.store = s.clone();
    }
    if let Some(k) = o.k {
        config.k = k;
    }
    if let Some(s) = o.cluster_seed {
        config.seeds.cluster = s;
    }
    if let Some(s) = o.render_seed {
        config.seeds.render = s;
    }
    if let Some(p) = o.parallelism {
        config.parallelism = p;
    }
    config.check()?;
    configure_threads(config.parallelism);
    Ok(config)
}

fn workspace(cli: &Cli) -> oddforge_core::Result<Workspace> {
    Workspace::open(load_config(cli)?)
}

/// Store root and render parallelism for commands that may run without a config.
fn store_settings(cli: &Cli) -> oddforge_core::Result<(PathBuf, usize)> {
    if let Some(store) = &cli.overrides.store {
        if !cli.config.is_file() {
            return Ok((store.clone(), cli.overrides.parallelism.unwrap_or(0)));
        }
    }
    let config = load_config(cli)?;
    Ok((config.store, config.parallelism))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

fn run(cli: &Cli) -> Result<Outcome, Box<dyn std::error::Error>> {
    match &cli.command {
        Command::Validate => {
            let ws = workspace(cli)?;
            let m = ws.manifest();
            Ok(Outcome::ok(
                format!(
                    "config ok: run {} with {} test scenes and {} style scenes",
                    m.run_id,
                    m.input_ids.len(),
                    m.style_input_ids.len()
                ),
                json!({
                    "run_id": m.run_id,
                    "run_dir": ws.run_dir(),
                    "scenes": m.input_ids.len(),
                    "style_scenes": m.style_input_ids.len(),
                }),
            ))
        }
        Command::Encode => {
            let ws = workspace(cli)?;
            let out = ws.encode()?;
            Ok(Outcome::ok(
                format!(
                    "encoded {} regions from {} scenes into {}",
                    out.regions,
                    out.scenes,
                    out.path.display()
                ),
                json!({ "run_id": ws.run_id(), "scenes": out.scenes, "regions": out.regions, "path": out.path }),
            ))
        }
        Command::Cluster => {
            let mut ws = workspace(cli)?;
            let catalog = ws.cluster()?;
            let clusters: usize = catalog.categories.iter().map(|c| c.clusters.len()).sum();
            let labeled = catalog
                .categories
                .iter()
                .flat_map(|c| &c.clusters)
                .filter(|c| c.concept.is_some())
                .count();
            Ok(Outcome::ok(
                format!(
                    "clustered {} categories into {clusters} clusters ({labeled} labeled), catalog {}",
                    catalog.categories.len(),
                    ws.catalog_path().display()
                ),
                json!({
                    "run_id": ws.run_id(),
                    "categories": catalog.categories.len(),
                    "clusters": clusters,
                    "labeled": labeled,
                    "path": ws.catalog_path(),
                }),
            ))
        }
        Command::Label(args) => {
            let mut ws = workspace(cli)?;
            let (catalog, what) = match (&args.prototypes, &args.category, args.cluster, &args.concept) {
                (Some(path), _, _, _) => {
                    let prototypes: Vec<Prototype> = read_json(path)?;
                    let n = prototypes.len();
                    (ws.label_from_prototypes(&prototypes)?, format!("{n} prototypes"))
                }
                (None, Some(cat), Some(idx), Some(concept)) => (
                    ws.label(cat, idx, concept)?,
                    format!("{cat} cluster {idx} as '{concept}'"),
                ),
                _ => return Err(Error::Config("label needs --category, --cluster and --concept, or --prototypes".into()).into()),
            };
            let labels: Vec<Value> = catalog
                .categories
                .iter()
                .flat_map(|c| {
                    c.clusters.iter().enumerate().filter_map(move |(i, cl)| {
                        cl.concept
                            .as_ref()
                            .map(|concept| json!({ "category_id": c.id, "cluster": i, "concept": concept }))
                    })
                })
                .collect();
            Ok(Outcome::ok(
                format!("labeled {what}; {} clusters carry a concept", labels.len()),
                json!({ "run_id": ws.run_id(), "labels": labels }),
            ))
        }
        Command::Suite => {
            let mut ws = workspace(cli)?;
            let out = ws.suite()?;
            let means: Vec<String> = out
                .results
                .conditions
                .iter()
                .map(|c| format!("{} {}", c.condition, fmt_opt(c.aggregate.mean_iou)))
                .collect();
            let failed: usize = out.results.conditions.iter().map(|c| c.failed).sum();
            Ok(Outcome::ok(
                format!(
                    "suite: {} variants over {} conditions; mean IoU {}{}",
                    out.manifest.variants.len(),
                    out.results.conditions.len(),
                    means.join(", "),
                    if failed > 0 { format!("; {failed} samples failed") } else { String::new() }
                ),
                json!({
                    "run_id": ws.run_id(),
                    "variants": out.manifest.variants.len(),
                    "conditions": out.results.conditions.iter().map(|c| json!({
                        "condition": c.condition,
                        "mean_iou": c.aggregate.mean_iou,
                        "mean_iou_all": c.aggregate.mean_iou_all,
                        "frequency_weighted_iou": c.aggregate.frequency_weighted_iou,
                        "scored": c.scored,
                        "failed": c.failed,
                    })).collect::<Vec<_>>(),
                    "warnings": out.manifest.warnings,
                    "partial": out.results.partial,
                }),
            ))
        }
        Command::Sweep(args) => {
            let ws = workspace(cli)?;
            let r = ws.sweep(&args.scene, &args.from, &args.to, args.steps, args.focus.as_deref())?;
            let series: Vec<String> = r.focus_series().into_iter().map(fmt_opt).collect();
            let flags: Vec<String> = r
                .flags
                .iter()
                .map(|f| {
                    let kind = match f.flag.kind {
                        FlagKind::Drop => "drop",
                        FlagKind::Recovery => "recovery",
                    };
                    format!("{kind} {}->{}", f.flag.step, f.flag.step + 1)
                })
                .collect();
            Ok(Outcome::ok(
                format!(
                    "sweep {} {}->{}: {} IoU [{}]; flags: {}",
                    r.scene_id,
                    r.from,
                    r.to,
                    ws.registry().name(r.focus_category),
                    series.join(", "),
                    if flags.is_empty() { "none".to_string() } else { flags.join(", ") }
                ),
                json!({ "run_id": ws.run_id(), "sweep": r }),
            ))
        }
        Command::Comply => {
            let ws = workspace(cli)?;
            let out = ws.comply()?;
            let r = &out.report;
            let overall = serde_json::to_value(r.overall)?;
            let overall = overall.as_str().unwrap_or_default();
            let failing = r
                .cells
                .iter()
                .filter(|c| c.status == oddforge_core::sweep::CellStatus::Fail)
                .count();
            Ok(Outcome {
                line: format!(
                    "compliance {overall}: {failing} failing cells over {} conditions; {} cells changed",
                    r.conditions.len(),
                    out.changed.len()
                ),
                summary: json!({
                    "run_id": ws.run_id(),
                    "overall": overall,
                    "exit_code": r.exit_code(),
                    "failing_cells": failing,
                    "changed_cells": out.changed,
                    "path": ws.store().report_path(ws.run_id(), "compliance"),
                }),
                code: r.exit_code() as u8,
            })
        }
        Command::Verdict(args) => {
            let ws = workspace(cli)?;
            let kind = if args.reject {
                VerdictKind::Rejected
            } else {
                VerdictKind::Accepted
            };
            let ack = ws.record_verdict(&args.scene, &args.sample, kind, &args.reason, &args.author)?;
            let word = if args.reject { "rejected" } else { "accepted" };
            Ok(Outcome::ok(
                format!(
                    "{word} {}/{}; rerun `oddforge comply` to refresh the report",
                    args.scene, args.sample
                ),
                json!({ "run_id": ws.run_id(), "scene_id": args.scene, "sample": args.sample, "ack": ack }),
            ))
        }
        Command::InitOdd { out } => {
            let ws = workspace(cli)?;
            let odd: OddSpec = ws.odd(&ws.catalog()?)?;
            odd.save(out, ws.registry())?;
            Ok(Outcome::ok(
                format!("wrote {} conditions to {}", odd.conditions.len(), out.display()),
                json!({ "run_id": ws.run_id(), "conditions": odd.conditions.len(), "path": out }),
            ))
        }
        Command::Runs => {
            let (root, _) = store_settings(cli)?;
            let store = Store::open(&root)?;
            let runs = store.list_runs()?;
            let lines: Vec<String> = runs
                .iter()
                .map(|m| format!("{}  {}  {} scenes", m.run_id, m.created_at.to_rfc3339(), m.input_ids.len()))
                .collect();
            let line = if lines.is_empty() {
                format!("no runs in {}", root.display())
            } else {
                lines.join("\n")
            };
            let summary: Vec<Value> = runs
                .iter()
                .map(|m| json!({ "run_id": m.run_id, "created_at": m.created_at, "scenes": m.input_ids.len() }))
                .collect();
            Ok(Outcome::ok(line, Value::Array(summary)))
        }
        Command::Serve { addr, ui_dir } => {
            let (root, parallelism) = store_settings(cli)?;
            configure_threads(parallelism);
            let state = Arc::new(AppState::new(&root, parallelism)?);
            eprintln!("serving {} on http://{addr}", root.display());
            serve_blocking(state, *addr, ui_dir.clone())?;
            Ok(Outcome::ok("server stopped".into(), json!({ "stopped": true })))
        }
        Command::DemoData {
            out,
            scenes,
            per_weather,
        } => {
            let layout = write_demo(out, *scenes, *per_weather)?;
            Ok(Outcome::ok(
                format!(
                    "wrote {scenes} test scenes and {} style scenes; config {}",
                    per_weather * 4,
                    layout.config.display()
                ),
                serde_json::to_value(&layout)?,
            ))
        }
    }
}
