//! `tab3d eval` — score prediction files against labelled boxes.
//!
//! Predictions, ground truth, proposals, and candidates all share one row
//! format: JSONL of `{"query_id", "box": [cx,cy,cz,dx,dy,dz], "subset"?}`,
//! with `"box": null` marking an aborted prediction. The default mode prints
//! an Acc@threshold table; `--top1` instead checks, per query, whether the
//! predicted box selects the ground-truth candidate from a provided set.
//! Either way a machine-readable `report.json` lands in the output
//! directory, with the only non-deterministic bytes (the wall-clock time and
//! input paths) confined to its `meta` field.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use serde::Serialize;
use tab3d_core::evaluation::{
    accuracy, group_proposals, iou3d, join_records, read_jsonl, refine_with_proposals,
    render_table, top1_selection, BoxRow, EvalRecord, ProposalSet, Score, Subset,
};
use tab3d_core::pointcloud::Bbox3D;

#[derive(Args)]
pub struct EvalArgs {
    /// Predictions (JSONL box rows).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth in the same row format; every row needs a box.
    #[arg(long)]
    pub gt: PathBuf,
    /// Scene proposal boxes; each prediction snaps to its best-overlap
    /// proposal before scoring.
    #[arg(long)]
    pub proposals: Option<PathBuf>,
    /// Score top-1 candidate selection instead of IoU accuracy.
    #[arg(long, requires = "candidates")]
    pub top1: bool,
    /// Candidate boxes per query for --top1.
    #[arg(long, requires = "top1")]
    pub candidates: Option<PathBuf>,
    /// IoU thresholds for the accuracy table.
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5])]
    pub thresholds: Vec<f64>,
    /// Directory for report.json.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: EvalArgs) -> Result<u8> {
    let preds: Vec<BoxRow> = read_jsonl(&args.pred)
        .with_context(|| format!("reading predictions {}", args.pred.display()))?;
    if preds.is_empty() {
        bail!("prediction file {} has no rows", args.pred.display());
    }
    let gts: Vec<BoxRow> = read_jsonl(&args.gt)
        .with_context(|| format!("reading ground truth {}", args.gt.display()))?;
    for row in &gts {
        if row.bbox.is_none() {
            bail!("ground-truth row {:?} has no box", row.query_id);
        }
    }
    for t in &args.thresholds {
        if !(*t > 0.0 && *t < 1.0) {
            bail!("threshold {t} is outside (0, 1)");
        }
    }
    let mut records = join_records(&preds, &gts)?;

    if let Some(path) = &args.proposals {
        let rows: Vec<BoxRow> = read_jsonl(path)
            .with_context(|| format!("reading proposals {}", path.display()))?;
        let sets = group_proposals(&rows);
        for record in &mut records {
            if let (Some(pred), Some(set)) = (record.predicted, sets.get(&record.query_id)) {
                record.predicted = Some(refine_with_proposals(&pred, set));
            }
        }
    }

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let meta = meta_json(&args);

    let report = if args.top1 {
        let path = args.candidates.as_ref().expect("clap ties --top1 to --candidates");
        let rows: Vec<BoxRow> = read_jsonl(path)
            .with_context(|| format!("reading candidates {}", path.display()))?;
        let summary = score_top1(&records, &group_proposals(&rows))?;
        print!("{}", render_top1(&summary));
        serde_json::json!({ "meta": meta, "top1": summary })
    } else {
        let reports = accuracy(&records, &args.thresholds)?;
        print!("{}", render_table(&reports));
        serde_json::json!({ "meta": meta, "accuracy": reports })
    };
    let report_path = args.out.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", report_path.display()))?;
    Ok(0)
}

fn meta_json(args: &EvalArgs) -> serde_json::Value {
    let unix_time = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    serde_json::json!({
        "unix_time": unix_time,
        "pred": args.pred.display().to_string(),
        "gt": args.gt.display().to_string(),
    })
}

#[derive(Debug, Serialize)]
struct Top1Summary {
    overall: Score,
    per_subset: BTreeMap<Subset, Score>,
}

/// A query counts as correct when the predicted box picks the candidate that
/// best overlaps the ground truth; aborted predictions count as misses. A
/// query whose candidate set is missing, empty, or disjoint from its ground
/// truth has no answerable target, which is a data error rather than a miss.
fn score_top1(
    records: &[EvalRecord],
    sets: &BTreeMap<String, ProposalSet>,
) -> Result<Top1Summary> {
    let mut overall = (0usize, 0usize);
    let mut per: BTreeMap<Subset, (usize, usize)> = BTreeMap::new();
    for record in records {
        let set = sets
            .get(&record.query_id)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| anyhow!("no candidates for query {:?}", record.query_id))?;
        let target = target_index(set, &record.gt).ok_or_else(|| {
            anyhow!(
                "candidates for query {:?} do not overlap its ground-truth box",
                record.query_id
            )
        })?;
        let correct = record
            .predicted
            .is_some_and(|pred| top1_selection(&pred, set, target));
        overall.1 += 1;
        overall.0 += usize::from(correct);
        let entry = per.entry(record.subset).or_insert((0, 0));
        entry.1 += 1;
        entry.0 += usize::from(correct);
    }
    let score = |(hits, total): (usize, usize)| Score {
        hits,
        total,
        fraction: hits as f64 / total as f64,
    };
    Ok(Top1Summary {
        overall: score(overall),
        per_subset: per.into_iter().map(|(s, c)| (s, score(c))).collect(),
    })
}

/// Index of the candidate the ground truth points at: the argmax-IoU box,
/// ties to the lowest index, `None` when nothing overlaps at all.
fn target_index(candidates: &[Bbox3D], gt: &Bbox3D) -> Option<usize> {
    let mut best = (0usize, 0.0f64);
    for (i, candidate) in candidates.iter().enumerate() {
        let iou = iou3d(candidate, gt);
        if iou > best.1 {
            best = (i, iou);
        }
    }
    (best.1 > 0.0).then_some(best.0)
}

fn render_top1(summary: &Top1Summary) -> String {
    let mut out = String::new();
    out.push_str("Top-1\n");
    out.push_str(&format!(
        "  {:<10} {:>5} / {:<5} = {:.4}\n",
        "overall", summary.overall.hits, summary.overall.total, summary.overall.fraction
    ));
    for (subset, score) in &summary.per_subset {
        if *subset == Subset::None && summary.per_subset.len() == 1 {
            continue;
        }
        out.push_str(&format!(
            "  {:<10} {:>5} / {:<5} = {:.4}\n",
            format!("{subset:?}").to_lowercase(),
            score.hits,
            score.total,
            score.fraction
        ));
    }
    out
}
