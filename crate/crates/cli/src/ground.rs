//! `tab3d ground` — run the grounding pipeline over a scene directory.
//!
//! A single run writes `trace.jsonl` (every Think–Act step), `pred_pcd.ply`
//! (the reconstructed target cloud) and, when the run finishes, a
//! `pred_bbox.json` holding `[cx, cy, cz, dx, dy, dz]`. Batch mode grounds a
//! JSONL file of queries against the same scene, one subdirectory per query
//! plus a `pred.jsonl` ready for `tab3d eval`.
//!
//! The toolkit decides where perception comes from: `oracle` derives
//! detections and replies from the scene's `ground_truth.json`, `replay`
//! serves recorded responses from a log file, and `remote` calls HTTP
//! endpoints configured by flags or the `TAB_*` environment variables.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Deserialize;
use tab3d_core::agent::{run_react, run_scripted, AgentAction, GroundingRun, PipelineConfig};
use tab3d_core::evaluation::{write_jsonl, BoxRow, Subset};
use tab3d_core::scene::{load_scene, GroundTruth, Scene};
use tab3d_core::semantic::remote::RemoteConfig;
use tab3d_core::semantic::replay::{ReplayChat, ReplayLog};
use tab3d_core::semantic::{Chat, Toolkit};

#[derive(Args)]
pub struct GroundArgs {
    /// Scene directory (color/, depth/, pose/, intrinsics.txt).
    #[arg(long)]
    pub scene: PathBuf,
    /// What to find, e.g. "the pillow on the left bed".
    #[arg(long)]
    pub query: Option<String>,
    /// JSONL file of {"query_id", "query"} rows, grounded against --scene.
    #[arg(long)]
    pub batch: Option<PathBuf>,
    /// scripted follows the fixed tool sequence; react lets a chat planner
    /// choose each step.
    #[arg(long, value_enum, default_value_t = Mode::Scripted)]
    pub mode: Mode,
    /// Where detections, masks, and chat replies come from.
    #[arg(long, value_enum, default_value_t = ToolkitKind::Oracle)]
    pub toolkit: ToolkitKind,
    /// Pipeline configuration overrides (JSON; omitted fields keep their
    /// defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for traces and predictions.
    #[arg(long)]
    pub out: PathBuf,
    /// Recorded tool responses backing --toolkit replay.
    #[arg(long)]
    pub replay_log: Option<PathBuf>,
    /// Recorded planner replies driving --mode react without a live model
    /// (the log's chat tape is consumed in order).
    #[arg(long)]
    pub planner_log: Option<PathBuf>,
    /// Step budget for react mode.
    #[arg(long, default_value_t = 64)]
    pub max_steps: usize,
    /// Worker threads for batch grounding.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Chat endpoint for --toolkit remote (overrides TAB_CHAT_URL).
    #[arg(long)]
    pub chat_url: Option<String>,
    /// Detector endpoint for --toolkit remote (overrides TAB_DETECTOR_URL).
    #[arg(long)]
    pub detector_url: Option<String>,
    /// Segmenter endpoint for --toolkit remote (overrides TAB_SEGMENTER_URL).
    #[arg(long)]
    pub segmenter_url: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Scripted,
    React,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ToolkitKind {
    Oracle,
    Replay,
    Remote,
}

pub fn run(args: GroundArgs) -> Result<u8> {
    let config = load_config(args.config.as_deref())?;
    let scene = Arc::new(
        load_scene(&args.scene, config.max_frames)
            .with_context(|| format!("loading scene {}", args.scene.display()))?,
    );
    let toolkit = build_toolkit(&args, &scene)?;
    let planner = build_planner(&args, &toolkit)?;

    match (&args.query, &args.batch) {
        (Some(query), None) => {
            let run = ground_one(&scene, query, &toolkit, planner.as_deref(), &args, config, &args.out)?;
            match run.trace.steps.last().map(|s| &s.action) {
                Some(AgentAction::Finish { message }) => println!("{message}"),
                Some(AgentAction::Abort { reason }) => eprintln!("aborted: {reason}"),
                _ => {}
            }
            Ok(if run.bbox.is_some() { 0 } else { 2 })
        }
        (None, Some(batch)) => ground_batch(&scene, batch, &toolkit, &args, config),
        (Some(_), Some(_)) => bail!("--query and --batch are mutually exclusive"),
        (None, None) => bail!("one of --query or --batch is required"),
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let config: PipelineConfig = match path {
        None => PipelineConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
    };
    config.validate()?;
    Ok(config)
}

fn build_toolkit(args: &GroundArgs, scene: &Arc<Scene>) -> Result<Toolkit> {
    match args.toolkit {
        ToolkitKind::Oracle => {
            let gt_path = GroundTruth::default_path(&args.scene);
            let gt = GroundTruth::load(&gt_path)
                .with_context(|| format!("the oracle toolkit needs {}", gt_path.display()))?;
            Ok(Toolkit::oracle(scene.clone(), gt))
        }
        ToolkitKind::Replay => {
            let Some(path) = &args.replay_log else {
                bail!("--toolkit replay requires --replay-log");
            };
            Ok(Toolkit::replay(scene.clone(), ReplayLog::load(path)?))
        }
        ToolkitKind::Remote => {
            let remote = match (&args.chat_url, &args.detector_url, &args.segmenter_url) {
                (Some(c), Some(d), Some(s)) => RemoteConfig::new(c, d, s),
                (None, None, None) => RemoteConfig::from_env()?,
                _ => bail!(
                    "--chat-url, --detector-url, and --segmenter-url must be given \
                     together (or all through the TAB_* environment variables)"
                ),
            };
            Ok(Toolkit::remote(scene.clone(), remote))
        }
    }
}

/// React mode needs a chat source to plan with: a recorded tape when one is
/// given, otherwise the remote toolkit's live chat endpoint.
fn build_planner(args: &GroundArgs, toolkit: &Toolkit) -> Result<Option<Arc<dyn Chat>>> {
    if args.mode != Mode::React {
        return Ok(None);
    }
    let planner: Arc<dyn Chat> = match &args.planner_log {
        Some(path) => {
            let log = ReplayLog::load(path)?;
            Arc::new(ReplayChat::new(log.chat))
        }
        None if args.toolkit == ToolkitKind::Remote => toolkit.chat.clone(),
        None => bail!("react mode needs a planner: pass --planner-log or use --toolkit remote"),
    };
    Ok(Some(planner))
}

fn ground_one(
    scene: &Arc<Scene>,
    query: &str,
    toolkit: &Toolkit,
    planner: Option<&dyn Chat>,
    args: &GroundArgs,
    config: PipelineConfig,
    out: &Path,
) -> Result<GroundingRun> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let run = match args.mode {
        Mode::Scripted => run_scripted(scene, query, toolkit, config, Some(out))?,
        Mode::React => {
            let planner = planner.expect("react mode always builds a planner");
            run_react(scene, query, toolkit, planner, config, args.max_steps, Some(out))?
        }
    };
    run.trace.write_jsonl(&out.join("trace.jsonl"))?;
    if let Some(bbox) = run.bbox {
        let text = serde_json::to_string_pretty(&bbox.to_array())?;
        fs::write(out.join("pred_bbox.json"), text)?;
    }
    Ok(run)
}

#[derive(Deserialize)]
struct BatchRow {
    query_id: String,
    query: String,
}

fn ground_batch(
    scene: &Arc<Scene>,
    batch_path: &Path,
    toolkit: &Toolkit,
    args: &GroundArgs,
    config: PipelineConfig,
) -> Result<u8> {
    if args.mode == Mode::React {
        bail!("batch grounding is scripted-only: a react planner tape covers a single query");
    }
    let text = fs::read_to_string(batch_path)
        .with_context(|| format!("reading batch {}", batch_path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: BatchRow = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", batch_path.display(), i + 1))?;
        if row.query_id.is_empty()
            || row.query_id.contains(['/', '\\'])
            || row.query_id.starts_with('.')
        {
            bail!("query_id {:?} is not usable as a directory name", row.query_id);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("batch file {} has no rows", batch_path.display());
    }
    let mut seen = BTreeSet::new();
    for row in &rows {
        if !seen.insert(row.query_id.as_str()) {
            bail!("duplicate query_id {:?} in batch", row.query_id);
        }
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    // Workers pull row indices from a shared counter; each run writes into
    // its own subdirectory, so the only shared state is the result list.
    let jobs = args.jobs.clamp(1, rows.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<GroundingRun>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(row) = rows.get(i) else { break };
                let out = args.out.join(&row.query_id);
                let run = ground_one(scene, &row.query, toolkit, None, args, config, &out);
                results.lock().expect("no worker panicked").push((i, run));
            });
        }
    });

    let mut collected = results.into_inner().expect("all workers joined");
    collected.sort_by_key(|(i, _)| *i);
    let mut pred_rows = Vec::with_capacity(rows.len());
    let mut aborted = 0usize;
    for ((_, outcome), row) in collected.into_iter().zip(&rows) {
        let run = outcome.with_context(|| format!("grounding {:?}", row.query_id))?;
        if run.bbox.is_none() {
            aborted += 1;
            log::warn!("{}: aborted", row.query_id);
        }
        pred_rows.push(BoxRow {
            query_id: row.query_id.clone(),
            bbox: run.bbox,
            subset: Subset::None,
        });
    }
    let pred_path = args.out.join("pred.jsonl");
    write_jsonl(&pred_rows, &pred_path)?;
    println!(
        "grounded {} queries ({} aborted); wrote {}",
        rows.len(),
        aborted,
        pred_path.display()
    );
    Ok(if aborted == 0 { 0 } else { 2 })
}
