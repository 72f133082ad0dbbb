//! COCO-style mean average precision, retained-proposal counts and the
//! duplicate-removal method runners.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::suppression::{
    box_vote, iou_oracle, nms, no_removal, score_oracle, soft_nms, GroundTruth, ScoredProposal,
    SoftNmsParams,
};
use crate::synthdata::Scene;
use crate::training::{class_groups, csv_err, Cascade};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

/// Retained-proposal floor: detections scoring above this count as kept.
pub const RETAIN_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub class_id: usize,
    pub bbox: BBox,
    pub score: f64,
    pub id: usize,
}

fn det_cmp(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image.cmp(&b.image))
        .then(a.id.cmp(&b.id))
}

/// Greedy COCO matching for one class. Detections are visited by descending
/// score (ties by image, then id); each takes the unmatched ground truth in
/// its image with the highest IoU at or above `thresh`. Returns
/// `(detection index, is_true_positive)` in visiting order.
pub fn match_detections(
    dets: &[Detection],
    gts: &[(usize, BBox)],
    thresh: f64,
) -> Vec<(usize, bool)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| det_cmp(&dets[a], &dets[b]));
    let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, (img, _)) in gts.iter().enumerate() {
        by_image.entry(*img).or_default().push(k);
    }
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|d| {
            let det = &dets[d];
            let mut best: Option<(usize, f64)> = None;
            for &k in by_image.get(&det.image).map(Vec::as_slice).unwrap_or(&[]) {
                if taken[k] {
                    continue;
                }
                let ov = iou(&det.bbox, &gts[k].1);
                if ov >= thresh && best.is_none_or(|(_, b)| ov > b) {
                    best = Some((k, ov));
                }
            }
            if let Some((k, _)) = best {
                taken[k] = true;
            }
            (d, best.is_some())
        })
        .collect()
}

/// 101-point interpolated AP from TP flags in descending-score order.
/// `None` when there is nothing to score (no ground truth, no detections).
pub fn average_precision(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let pos = recall.partition_point(|&v| v < target);
        if pos < precision.len() {
            sum += precision[pos];
        }
    }
    Some(sum / 101.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    /// AP at each of [`iou_thresholds`].
    pub ap: [f64; 10],
    pub ap50: f64,
    pub ap75: f64,
    pub mean_retained: f64,
}

/// Evaluates detections over `n_images` images. Per class and threshold an
/// AP is computed; classes are averaged per threshold and the thresholds are
/// averaged into mAP.
pub fn map_coco(dets: &[Detection], gts: &[(usize, GroundTruth)], n_images: usize) -> EvalReport {
    let classes: BTreeSet<usize> = dets
        .iter()
        .map(|d| d.class_id)
        .chain(gts.iter().map(|(_, g)| g.class_id))
        .collect();
    let thresholds = iou_thresholds();
    let mut ap = [0.0; 10];
    for (t, &thresh) in thresholds.iter().enumerate() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for &c in &classes {
            let cd: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).cloned().collect();
            let cg: Vec<(usize, BBox)> = gts
                .iter()
                .filter(|(_, g)| g.class_id == c)
                .map(|(i, g)| (*i, g.bbox))
                .collect();
            let flags: Vec<bool> = match_detections(&cd, &cg, thresh)
                .into_iter()
                .map(|(_, f)| f)
                .collect();
            if let Some(v) = average_precision(&flags, cg.len()) {
                sum += v;
                count += 1;
            }
        }
        ap[t] = if count == 0 { 0.0 } else { sum / count as f64 };
    }
    let retained = dets.iter().filter(|d| d.score > RETAIN_FLOOR).count();
    EvalReport {
        map: ap.iter().sum::<f64>() / ap.len() as f64,
        ap,
        ap50: ap[0],
        ap75: ap[5],
        mean_retained: if n_images == 0 {
            0.0
        } else {
            retained as f64 / n_images as f64
        },
    }
}

/// Classical and oracle selectors run per image and class.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    NoRemoval,
    Nms { thresh: f64 },
    SoftNms(SoftNmsParams),
    BoxVote { nms_thresh: f64, vote_thresh: f64 },
    ScoreOracle { iou_thresh: f64 },
    IouOracle,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::NoRemoval => "no-removal",
            Method::Nms { .. } => "nms",
            Method::SoftNms(_) => "softnms",
            Method::BoxVote { .. } => "boxvote",
            Method::ScoreOracle { .. } => "score-oracle",
            Method::IouOracle => "iou-oracle",
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "no-removal" => Method::NoRemoval,
            "nms" => Method::Nms { thresh: 0.6 },
            "softnms" => Method::SoftNms(SoftNmsParams::default()),
            "boxvote" => Method::BoxVote {
                nms_thresh: 0.6,
                vote_thresh: 0.5,
            },
            "score-oracle" => Method::ScoreOracle { iou_thresh: 0.5 },
            "iou-oracle" => Method::IouOracle,
            other => return Err(Error::InvalidInput(format!("unknown method `{other}`"))),
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn det(image: usize, p: &ScoredProposal, bbox: BBox, score: f64) -> Detection {
    Detection {
        image,
        class_id: p.class_id,
        bbox,
        score,
        id: p.id,
    }
}

/// Detections one method emits for one scene.
pub fn run_method(method: &Method, scene: &Scene, image: usize) -> Vec<Detection> {
    let mut out = Vec::new();
    for (class, members) in class_groups(&scene.props) {
        let cands: Vec<ScoredProposal> = members.iter().map(|&i| scene.props[i].clone()).collect();
        let gts: Vec<GroundTruth> = scene
            .gts
            .iter()
            .filter(|g| g.class_id == class)
            .cloned()
            .collect();
        let plain = |k: usize| det(image, &cands[k], cands[k].bbox, cands[k].s0);
        match method {
            Method::NoRemoval => out.extend(no_removal(&cands, RETAIN_FLOOR).into_iter().map(plain)),
            Method::Nms { thresh } => out.extend(nms(&cands, *thresh).into_iter().map(plain)),
            Method::SoftNms(params) => out.extend(
                soft_nms(&cands, params)
                    .into_iter()
                    .map(|(k, s)| det(image, &cands[k], cands[k].bbox, s)),
            ),
            Method::BoxVote {
                nms_thresh,
                vote_thresh,
            } => {
                let kept: Vec<ScoredProposal> =
                    nms(&cands, *nms_thresh).into_iter().map(|k| cands[k].clone()).collect();
                out.extend(
                    box_vote(&kept, &cands, *vote_thresh)
                        .iter()
                        .map(|p| det(image, p, p.bbox, p.s0)),
                );
            }
            Method::ScoreOracle { iou_thresh } => out.extend(
                score_oracle(&cands, &gts, *iou_thresh)
                    .into_iter()
                    .map(|(_, k)| plain(k)),
            ),
            Method::IouOracle => {
                out.extend(iou_oracle(&cands, &gts).into_iter().map(|(_, k)| plain(k)))
            }
        }
    }
    out
}

/// Detections of the trained cascade: every candidate with a positive final
/// score.
pub fn run_cascade(cascade: &Cascade, scene: &Scene, image: usize) -> Result<Vec<Detection>> {
    let scores = cascade.score_scene(scene)?;
    Ok(scene
        .props
        .iter()
        .zip(scores)
        .filter(|&(_, s)| s > 0.0)
        .map(|(p, s)| det(image, p, p.bbox, s))
        .collect())
}

pub fn ground_truths(scenes: &[Scene]) -> Vec<(usize, GroundTruth)> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.gts.iter().map(move |g| (i, g.clone())))
        .collect()
}

pub fn evaluate_method(method: &Method, scenes: &[Scene]) -> EvalReport {
    let dets: Vec<Detection> = scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| run_method(method, s, i))
        .collect();
    map_coco(&dets, &ground_truths(scenes), scenes.len())
}

pub fn evaluate_cascade(cascade: &Cascade, scenes: &[Scene]) -> Result<EvalReport> {
    let mut dets = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        dets.extend(run_cascade(cascade, s, i)?);
    }
    Ok(map_coco(&dets, &ground_truths(scenes), scenes.len()))
}

/// The four selectors compared in the oracle experiment.
pub fn oracle_methods() -> [Method; 4] {
    [
        Method::NoRemoval,
        Method::Nms { thresh: 0.6 },
        Method::ScoreOracle { iou_thresh: 0.5 },
        Method::IouOracle,
    ]
}

pub fn oracle_table(scenes: &[Scene]) -> Vec<(String, EvalReport)> {
    oracle_methods()
        .iter()
        .map(|m| (m.name().to_string(), evaluate_method(m, scenes)))
        .collect()
}

pub fn report_header() -> Vec<String> {
    let mut h = vec!["method".into(), "mAP".into(), "AP50".into(), "AP75".into()];
    h.extend(iou_thresholds().iter().map(|t| format!("AP@{t:.2}")));
    h.push("mean_retained".into());
    h
}

pub fn write_reports(path: &Path, rows: &[(String, EvalReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(report_header()).map_err(|e| csv_err(path, e))?;
    for (name, r) in rows {
        let mut rec = vec![name.clone(), r.map.to_string(), r.ap50.to_string(), r.ap75.to_string()];
        rec.extend(r.ap.iter().map(f64::to_string));
        rec.push(r.mean_retained.to_string());
        w.write_record(rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
