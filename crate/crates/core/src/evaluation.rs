//! Scoring predicted boxes against ground truth.
//!
//! The metrics are the usual grounding ones: exact axis-aligned 3D IoU
//! ([`iou3d`]), accuracy at IoU thresholds over record subsets
//! ([`accuracy`]), snapping a generated box onto the best detection proposal
//! ([`refine_with_proposals`]), and top-1 candidate selection
//! ([`top1_selection`]). Records, proposals and reports move through
//! JSON-lines files so batch runs can be diffed and re-scored without
//! rerunning the pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::pointcloud::Bbox3D;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to evaluate")]
    NoRecords,
    #[error("{path} line {line}: {message}")]
    BadRecord { path: String, line: usize, message: String },
    #[error("prediction for unknown query id {0}")]
    UnknownQuery(String),
    #[error("duplicate query id {0}")]
    DuplicateQuery(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Benchmark subset a record belongs to. `None` is the untagged default.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Unique,
    Multiple,
    Easy,
    Hard,
    Dep,
    Indep,
    #[default]
    None,
}

/// One scored query: what the pipeline predicted (nothing on an aborted
/// run) against the labelled box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    /// Absent when the run aborted; counts as a miss at every threshold.
    pub predicted: Option<Bbox3D>,
    pub gt: Bbox3D,
    #[serde(default)]
    pub subset: Subset,
}

/// Candidate boxes for one scene, as produced by an external proposal
/// generator. May be empty.
pub type ProposalSet = Vec<Bbox3D>;

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Exact axis-aligned 3D IoU via per-axis interval overlap.
///
/// A zero-volume union (both boxes degenerate) is 0 by convention, except
/// two identical point boxes, which overlap perfectly and score 1.
pub fn iou3d(a: &Bbox3D, b: &Bbox3D) -> f64 {
    let (a_lo, a_hi) = (a.min(), a.max());
    let (b_lo, b_hi) = (b.min(), b.max());
    let mut inter = 1.0;
    for axis in 0..3 {
        inter *= (a_hi[axis].min(b_hi[axis]) - a_lo[axis].max(b_lo[axis])).max(0.0);
    }
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        let identical_points = a == b && a.extent == Vec3::zeros();
        return if identical_points { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Accuracy of one group of records at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Score {
    pub hits: usize,
    pub total: usize,
    pub fraction: f64,
}

impl Score {
    fn tally(ious: impl Iterator<Item = f64>, threshold: f64) -> Self {
        let (mut hits, mut total) = (0, 0);
        for iou in ious {
            total += 1;
            if iou > threshold {
                hits += 1;
            }
        }
        Self { hits, total, fraction: hits as f64 / total as f64 }
    }
}

/// Accuracy at one IoU threshold, overall and per subset tag.
#[derive(Debug, Clone, Serialize)]
pub struct Accuracy {
    pub threshold: f64,
    pub overall: Score,
    /// Only the subsets that actually occur among the records.
    pub per_subset: BTreeMap<Subset, Score>,
}

/// Fraction of records whose predicted box clears each IoU threshold
/// (strictly), overall and per subset. A record without a prediction scores
/// IoU 0 and so misses every threshold.
pub fn accuracy(records: &[EvalRecord], thresholds: &[f64]) -> Result<Vec<Accuracy>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let ious: Vec<f64> = records
        .iter()
        .map(|r| r.predicted.as_ref().map_or(0.0, |p| iou3d(p, &r.gt)))
        .collect();
    Ok(thresholds
        .iter()
        .map(|&threshold| {
            let overall = Score::tally(ious.iter().copied(), threshold);
            let mut per_subset = BTreeMap::new();
            for subset in records.iter().map(|r| r.subset) {
                per_subset.entry(subset).or_insert_with(|| {
                    Score::tally(
                        records
                            .iter()
                            .zip(&ious)
                            .filter(|(r, _)| r.subset == subset)
                            .map(|(_, &iou)| iou),
                        threshold,
                    )
                });
            }
            Accuracy { threshold, overall, per_subset }
        })
        .collect())
}

/// Replaces `pred` with the proposal it overlaps most. An empty set, or one
/// where every proposal has zero IoU, leaves `pred` unchanged; ties keep the
/// lowest-index proposal.
pub fn refine_with_proposals(pred: &Bbox3D, proposals: &ProposalSet) -> Bbox3D {
    let mut best: Option<(usize, f64)> = None;
    for (i, proposal) in proposals.iter().enumerate() {
        let iou = iou3d(pred, proposal);
        if iou > best.map_or(0.0, |(_, v)| v) {
            best = Some((i, iou));
        }
    }
    match best {
        Some((i, _)) => proposals[i],
        None => *pred,
    }
}

/// Whether `pred` selects the right candidate: the argmax of IoU over
/// `candidates` (ties to the lowest index) must equal `target_index`, and
/// the overlap must be non-zero — a prediction disjoint from every candidate
/// selects nothing.
pub fn top1_selection(pred: &Bbox3D, candidates: &[Bbox3D], target_index: usize) -> bool {
    assert!(!candidates.is_empty(), "top-1 selection needs candidates");
    assert!(target_index < candidates.len(), "target index out of range");
    let (mut best_index, mut best_iou) = (0, f64::MIN);
    for (i, candidate) in candidates.iter().enumerate() {
        let iou = iou3d(pred, candidate);
        if iou > best_iou {
            (best_index, best_iou) = (i, iou);
        }
    }
    best_iou > 0.0 && best_index == target_index
}

// ---------------------------------------------------------------------------
// JSON-lines I/O
// ---------------------------------------------------------------------------

/// One row of a prediction/ground-truth/proposal file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRow {
    pub query_id: String,
    /// `null` marks an aborted prediction.
    #[serde(rename = "box")]
    pub bbox: Option<Bbox3D>,
    #[serde(default, skip_serializing_if = "is_default_subset")]
    pub subset: Subset,
}

fn is_default_subset(s: &Subset) -> bool {
    *s == Subset::None
}

/// Reads a JSON-lines file, skipping blank lines; errors carry the 1-based
/// line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| EvalError::BadRecord {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

pub fn write_jsonl<T: Serialize>(rows: &[T], path: &Path) -> Result<(), EvalError> {
    let mut file = fs::File::create(path)?;
    for row in rows {
        serde_json::to_writer(&mut file, row).map_err(std::io::Error::from)?;
        writeln!(file)?;
    }
    Ok(())
}

/// Joins prediction rows onto ground-truth rows by query id. Every
/// ground-truth row yields a record — queries the predictor never answered
/// become misses — while a prediction for an unknown query id is an error.
/// The subset tag comes from the ground-truth side.
pub fn join_records(preds: &[BoxRow], gts: &[BoxRow]) -> Result<Vec<EvalRecord>, EvalError> {
    let mut by_id: BTreeMap<&str, &BoxRow> = BTreeMap::new();
    for gt in gts {
        if by_id.insert(&gt.query_id, gt).is_some() {
            return Err(EvalError::DuplicateQuery(gt.query_id.clone()));
        }
    }
    let mut predicted: BTreeMap<&str, Option<Bbox3D>> = BTreeMap::new();
    for pred in preds {
        if !by_id.contains_key(pred.query_id.as_str()) {
            return Err(EvalError::UnknownQuery(pred.query_id.clone()));
        }
        if predicted.insert(&pred.query_id, pred.bbox).is_some() {
            return Err(EvalError::DuplicateQuery(pred.query_id.clone()));
        }
    }
    Ok(gts
        .iter()
        .map(|gt| EvalRecord {
            query_id: gt.query_id.clone(),
            predicted: predicted.get(gt.query_id.as_str()).copied().flatten(),
            gt: gt.bbox.expect("ground-truth rows carry a box"),
            subset: gt.subset,
        })
        .collect())
}

/// Groups proposal rows into one [`ProposalSet`] per query id, preserving
/// file order within each set.
pub fn group_proposals(rows: &[BoxRow]) -> BTreeMap<String, ProposalSet> {
    let mut sets: BTreeMap<String, ProposalSet> = BTreeMap::new();
    for row in rows {
        if let Some(bbox) = row.bbox {
            sets.entry(row.query_id.clone()).or_default().push(bbox);
        }
    }
    sets
}

/// Plain-text accuracy table, one block per threshold.
pub fn render_table(reports: &[Accuracy]) -> String {
    let mut out = String::new();
    for report in reports {
        out.push_str(&format!("Acc@{}\n", report.threshold));
        out.push_str(&format!(
            "  {:<10} {:>5} / {:<5} = {:.4}\n",
            "overall", report.overall.hits, report.overall.total, report.overall.fraction
        ));
        for (subset, score) in &report.per_subset {
            if *subset == Subset::None && report.per_subset.len() == 1 {
                continue; // untagged-only runs need no subset breakdown
            }
            out.push_str(&format!(
                "  {:<10} {:>5} / {:<5} = {:.4}\n",
                format!("{subset:?}").to_lowercase(),
                score.hits,
                score.total,
                score.fraction
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::Point3;

    fn cube(cx: f64, cy: f64, cz: f64, side: f64) -> Bbox3D {
        Bbox3D::new(Point3::new(cx, cy, cz), Vec3::new(side, side, side))
    }

    /// Unit cube shifted so its IoU with the origin unit cube is exactly
    /// `(1 - s) / (1 + s)`.
    fn shifted_unit_cube(s: f64) -> Bbox3D {
        cube(s, 0.0, 0.0, 1.0)
    }

    #[test]
    fn iou3d_closed_form_cases() {
        let unit = cube(0.0, 0.0, 0.0, 1.0);
        assert_eq!(iou3d(&unit, &unit), 1.0);
        assert_eq!(iou3d(&unit, &cube(5.0, 0.0, 0.0, 1.0)), 0.0);
        // Offset 0.5 along x: intersection 0.5, union 1.5.
        assert_eq!(iou3d(&unit, &shifted_unit_cube(0.5)), 1.0 / 3.0);
        // Touching faces intersect in a zero-volume slab.
        assert_eq!(iou3d(&unit, &shifted_unit_cube(1.0)), 0.0);
    }

    #[test]
    fn iou3d_degenerate_conventions() {
        let point = cube(1.0, 2.0, 3.0, 0.0);
        assert_eq!(iou3d(&point, &point), 1.0, "identical points coincide");
        assert_eq!(iou3d(&point, &cube(1.0, 2.0, 3.1, 0.0)), 0.0);
        // Zero-volume union that is not a point pair stays 0 by convention.
        let flat = Bbox3D::new(Point3::origin(), Vec3::new(1.0, 1.0, 0.0));
        assert_eq!(iou3d(&flat, &flat), 0.0);
        // A flat box against a real volume shares no volume either.
        assert_eq!(iou3d(&flat, &cube(0.0, 0.0, 0.0, 1.0)), 0.0);
    }

    proptest! {
        #[test]
        fn iou3d_is_symmetric_translation_invariant_and_bounded(
            ac in proptest::array::uniform3(-2.0f64..2.0),
            ae in proptest::array::uniform3(0.05f64..2.0),
            bc in proptest::array::uniform3(-2.0f64..2.0),
            be in proptest::array::uniform3(0.05f64..2.0),
            t in proptest::array::uniform3(-5.0f64..5.0),
        ) {
            let a = Bbox3D::new(Point3::from(ac), Vec3::from(ae));
            let b = Bbox3D::new(Point3::from(bc), Vec3::from(be));
            let iou = iou3d(&a, &b);
            prop_assert!((0.0..=1.0).contains(&iou));
            prop_assert_eq!(iou, iou3d(&b, &a));
            let shift = Vec3::from(t);
            let a_shifted = Bbox3D::new(a.center + shift, a.extent);
            let b_shifted = Bbox3D::new(b.center + shift, b.extent);
            prop_assert!((iou3d(&a_shifted, &b_shifted) - iou).abs() < 1e-9);
        }

        #[test]
        fn accuracy_is_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut records: Vec<EvalRecord> = (0..12)
                .map(|i| EvalRecord {
                    query_id: format!("q{i}"),
                    predicted: Some(shifted_unit_cube(rng.gen_range(0.0..1.5))),
                    gt: cube(0.0, 0.0, 0.0, 1.0),
                    subset: if i % 2 == 0 { Subset::Easy } else { Subset::Hard },
                })
                .collect();
            let before = accuracy(&records, &[0.25, 0.5]).unwrap();
            // Deterministic shuffle.
            for i in (1..records.len()).rev() {
                records.swap(i, rng.gen_range(0..=i));
            }
            let after = accuracy(&records, &[0.25, 0.5]).unwrap();
            for (x, y) in before.iter().zip(&after) {
                prop_assert_eq!(x.overall.hits, y.overall.hits);
                prop_assert_eq!(
                    x.per_subset.get(&Subset::Easy).unwrap().hits,
                    y.per_subset.get(&Subset::Easy).unwrap().hits
                );
            }
        }
    }

    #[test]
    fn accuracy_counts_misses_and_subsets() {
        let gt = cube(0.0, 0.0, 0.0, 1.0);
        let one = [EvalRecord {
            query_id: "q".into(),
            predicted: Some(shifted_unit_cube((1.0 - 0.3) / (1.0 + 0.3))),
            gt,
            subset: Subset::None,
        }];
        let acc = accuracy(&one, &[0.25, 0.5]).unwrap();
        assert_eq!(acc[0].overall.fraction, 1.0);
        assert_eq!(acc[1].overall.fraction, 0.0);

        let absent = [EvalRecord {
            query_id: "q".into(),
            predicted: None,
            gt,
            subset: Subset::None,
        }];
        let acc = accuracy(&absent, &[0.25, 0.5]).unwrap();
        assert_eq!(acc[0].overall.hits, 0);
        assert_eq!(acc[1].overall.hits, 0);

        // IoUs {0.1, 0.3, 0.6, 0.9} -> Acc@0.25 = 0.75, Acc@0.5 = 0.5.
        let records: Vec<EvalRecord> = [0.1, 0.3, 0.6, 0.9]
            .iter()
            .enumerate()
            .map(|(i, &target)| EvalRecord {
                query_id: format!("q{i}"),
                predicted: Some(shifted_unit_cube((1.0 - target) / (1.0 + target))),
                gt,
                subset: if i < 2 { Subset::Unique } else { Subset::Multiple },
            })
            .collect();
        let acc = accuracy(&records, &[0.25, 0.5]).unwrap();
        assert_eq!(acc[0].overall.fraction, 0.75);
        assert_eq!(acc[1].overall.fraction, 0.5);
        // Unique holds {0.1, 0.3}, Multiple holds {0.6, 0.9}.
        assert_eq!(acc[0].per_subset[&Subset::Unique].fraction, 0.5);
        assert_eq!(acc[0].per_subset[&Subset::Multiple].fraction, 1.0);
        assert_eq!(acc[1].per_subset[&Subset::Unique].fraction, 0.0);
        assert_eq!(acc[1].per_subset[&Subset::Multiple].fraction, 1.0);

        assert!(matches!(accuracy(&[], &[0.25]), Err(EvalError::NoRecords)));
    }

    #[test]
    fn refinement_snaps_to_best_proposal_or_passes_through() {
        let pred = cube(0.1, 0.0, 0.0, 1.0);
        let exact = cube(0.1, 0.0, 0.0, 1.0);
        let proposals = vec![cube(3.0, 0.0, 0.0, 1.0), exact, cube(0.2, 0.0, 0.0, 1.0)];
        assert_eq!(refine_with_proposals(&pred, &proposals), exact);

        assert_eq!(refine_with_proposals(&pred, &Vec::new()), pred);
        let far = vec![cube(9.0, 9.0, 9.0, 1.0)];
        assert_eq!(refine_with_proposals(&pred, &far), pred, "all-zero IoU passes through");
    }

    #[test]
    fn refinement_matches_linear_scan_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let mut random_box = || {
                cube(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.3..1.5),
                )
            };
            let pred = random_box();
            let proposals: ProposalSet = (0..50).map(|_| random_box()).collect();
            let refined = refine_with_proposals(&pred, &proposals);

            let best = proposals
                .iter()
                .map(|p| iou3d(&pred, p))
                .fold(0.0f64, f64::max);
            if best > 0.0 {
                assert_eq!(iou3d(&pred, &refined), best);
            } else {
                assert_eq!(refined, pred);
            }
        }
    }

    #[test]
    fn top1_rules() {
        let candidates =
            vec![cube(0.0, 0.0, 0.0, 1.0), cube(3.0, 0.0, 0.0, 1.0), cube(6.0, 0.0, 0.0, 1.0)];
        assert!(top1_selection(&cube(3.05, 0.0, 0.0, 1.0), &candidates, 1));
        assert!(!top1_selection(&cube(3.05, 0.0, 0.0, 1.0), &candidates, 0));
        // Disjoint from everything selects nothing, even the right index.
        assert!(!top1_selection(&cube(50.0, 0.0, 0.0, 1.0), &candidates, 0));
        // Equidistant tie between indices 1 and 3: the lowest index wins.
        let tied = vec![
            cube(9.0, 9.0, 9.0, 1.0),
            cube(-0.5, 0.0, 0.0, 1.0),
            cube(9.0, -9.0, 9.0, 1.0),
            cube(0.5, 0.0, 0.0, 1.0),
        ];
        assert!(top1_selection(&cube(0.0, 0.0, 0.0, 1.0), &tied, 1));
        assert!(!top1_selection(&cube(0.0, 0.0, 0.0, 1.0), &tied, 3));
    }

    #[test]
    fn jsonl_files_round_trip_and_join() {
        let dir = tempfile::tempdir().unwrap();
        let gt_path = dir.path().join("gt.jsonl");
        let pred_path = dir.path().join("pred.jsonl");

        let gts = vec![
            BoxRow { query_id: "a".into(), bbox: Some(cube(0.0, 0.0, 0.0, 1.0)), subset: Subset::Easy },
            BoxRow { query_id: "b".into(), bbox: Some(cube(2.0, 0.0, 0.0, 1.0)), subset: Subset::None },
        ];
        let preds = vec![BoxRow {
            query_id: "a".into(),
            bbox: Some(cube(0.1, 0.0, 0.0, 1.0)),
            subset: Subset::None,
        }];
        write_jsonl(&gts, &gt_path).unwrap();
        write_jsonl(&preds, &pred_path).unwrap();

        let records =
            join_records(&read_jsonl(&pred_path).unwrap(), &read_jsonl(&gt_path).unwrap())
                .unwrap();
        assert_eq!(records.len(), 2);
        assert!(records[0].predicted.is_some());
        assert_eq!(records[0].subset, Subset::Easy);
        assert!(records[1].predicted.is_none(), "unanswered query becomes a miss");

        let stray = vec![BoxRow { query_id: "zz".into(), bbox: None, subset: Subset::None }];
        assert!(matches!(join_records(&stray, &gts), Err(EvalError::UnknownQuery(id)) if id == "zz"));

        std::fs::write(&pred_path, "{\"query_id\": 3}\n").unwrap();
        match read_jsonl::<BoxRow>(&pred_path) {
            Err(EvalError::BadRecord { line: 1, .. }) => {}
            other => panic!("expected BadRecord on line 1, got {other:?}"),
        }
    }

    #[test]
    fn proposal_grouping_and_table_rendering() {
        let rows = vec![
            BoxRow { query_id: "a".into(), bbox: Some(cube(0.0, 0.0, 0.0, 1.0)), subset: Subset::None },
            BoxRow { query_id: "b".into(), bbox: Some(cube(1.0, 0.0, 0.0, 1.0)), subset: Subset::None },
            BoxRow { query_id: "a".into(), bbox: Some(cube(2.0, 0.0, 0.0, 1.0)), subset: Subset::None },
        ];
        let sets = group_proposals(&rows);
        assert_eq!(sets["a"].len(), 2);
        assert_eq!(sets["b"].len(), 1);

        let records = vec![EvalRecord {
            query_id: "a".into(),
            predicted: Some(cube(0.0, 0.0, 0.0, 1.0)),
            gt: cube(0.0, 0.0, 0.0, 1.0),
            subset: Subset::Hard,
        }];
        let table = render_table(&accuracy(&records, &[0.25, 0.5]).unwrap());
        assert!(table.contains("Acc@0.25"));
        assert!(table.contains("Acc@0.5"));
        assert!(table.contains("overall"));
        assert!(table.contains("hard"));
        assert!(table.contains("1 / 1"));
    }
}
