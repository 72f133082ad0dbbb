//! Classical duplicate removal (NMS, Soft-NMS, box voting) and the
//! ground-truth oracle selectors.
//!
//! Every function here works on the candidates of a single class; callers
//! split by class first. Selections are returned as indices into the input
//! slice.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};

/// A candidate box emitted by a detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredProposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub s0: f64,
    pub feat: Vec<f64>,
    pub id: usize,
}

/// A ground-truth object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
}

/// Canonical candidate order: score descending, then `(x1, y1, x2, y2, id)`
/// ascending. Total, so every sort built on it is deterministic.
pub fn canonical_cmp(a: &ScoredProposal, b: &ScoredProposal) -> Ordering {
    score_then_box(a.s0, &a.bbox, a.id, b.s0, &b.bbox, b.id)
}

fn score_then_box(sa: f64, ba: &BBox, ia: usize, sb: f64, bb: &BBox, ib: usize) -> Ordering {
    sb.total_cmp(&sa)
        .then(ba.x1.total_cmp(&bb.x1))
        .then(ba.y1.total_cmp(&bb.y1))
        .then(ba.x2.total_cmp(&bb.x2))
        .then(ba.y2.total_cmp(&bb.y2))
        .then(ia.cmp(&ib))
}

/// Indices of `cands` in canonical order.
pub fn canonical_order(cands: &[ScoredProposal]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&i, &j| canonical_cmp(&cands[i], &cands[j]));
    order
}

/// Greedy non-maximum suppression. A candidate is suppressed when its IoU
/// with an already kept candidate exceeds `thresh`. Returns kept indices in
/// selection order.
pub fn nms(cands: &[ScoredProposal], thresh: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in canonical_order(cands) {
        let b = &cands[i].bbox;
        if kept.iter().all(|&k| iou(&cands[k].bbox, b) <= thresh) {
            kept.push(i);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SoftNmsMethod {
    /// `s <- s * (1 - iou)` when `iou > thresh`.
    Linear { thresh: f64 },
    /// `s <- s * exp(-iou^2 / sigma)`.
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftNmsParams {
    pub method: SoftNmsMethod,
    pub score_floor: f64,
}

impl Default for SoftNmsParams {
    fn default() -> Self {
        SoftNmsParams {
            method: SoftNmsMethod::Linear { thresh: 0.5 },
            score_floor: 0.001,
        }
    }
}

/// Soft-NMS rescoring. Returns `(index, rescored)` pairs in selection order;
/// candidates whose score drops below the floor are dropped.
pub fn soft_nms(cands: &[ScoredProposal], params: &SoftNmsParams) -> Vec<(usize, f64)> {
    let mut live: Vec<(usize, f64)> = (0..cands.len())
        .map(|i| (i, cands[i].s0))
        .filter(|&(_, s)| s >= params.score_floor)
        .collect();
    let mut out = Vec::with_capacity(live.len());
    while !live.is_empty() {
        let best = (0..live.len())
            .min_by(|&a, &b| {
                let (ia, sa) = live[a];
                let (ib, sb) = live[b];
                score_then_box(sa, &cands[ia].bbox, cands[ia].id, sb, &cands[ib].bbox, cands[ib].id)
            })
            .expect("nonempty");
        let (top, top_score) = live.swap_remove(best);
        out.push((top, top_score));
        let top_box = cands[top].bbox;
        for entry in live.iter_mut() {
            let ov = iou(&top_box, &cands[entry.0].bbox);
            match params.method {
                SoftNmsMethod::Linear { thresh } => {
                    if ov > thresh {
                        entry.1 *= 1.0 - ov;
                    }
                }
                SoftNmsMethod::Gaussian { sigma } => {
                    entry.1 *= (-(ov * ov) / sigma).exp();
                }
            }
        }
        live.retain(|&(_, s)| s >= params.score_floor);
    }
    out
}

/// Replaces each kept box by the score-weighted mean of the pool boxes whose
/// IoU with it is at least `vote_thresh`. Scores are left untouched.
pub fn box_vote(
    kept: &[ScoredProposal],
    pool: &[ScoredProposal],
    vote_thresh: f64,
) -> Vec<ScoredProposal> {
    kept.iter()
        .map(|k| {
            let mut acc = [0.0f64; 4];
            let mut wsum = 0.0;
            for p in pool {
                if iou(&k.bbox, &p.bbox) >= vote_thresh {
                    let c: [f64; 4] = p.bbox.into();
                    for (a, v) in acc.iter_mut().zip(c) {
                        *a += p.s0 * v;
                    }
                    wsum += p.s0;
                }
            }
            let mut out = k.clone();
            if wsum > 0.0 {
                out.bbox = BBox::from(acc.map(|a| a / wsum));
            }
            out
        })
        .collect()
}

/// Keeps every candidate scoring strictly above `score_thresh`.
pub fn no_removal(cands: &[ScoredProposal], score_thresh: f64) -> Vec<usize> {
    (0..cands.len())
        .filter(|&i| cands[i].s0 > score_thresh)
        .collect()
}

/// Preference key used by the greedy claim procedure; smaller is preferred.
#[derive(Debug, Clone, Copy)]
struct Pref {
    primary: f64,
    secondary: f64,
    tie_box: [f64; 4],
    id: usize,
}

fn pref_cmp(a: &Pref, b: &Pref) -> Ordering {
    b.primary
        .total_cmp(&a.primary)
        .then(b.secondary.total_cmp(&a.secondary))
        .then(a.tie_box[0].total_cmp(&b.tie_box[0]))
        .then(a.tie_box[1].total_cmp(&b.tie_box[1]))
        .then(a.tie_box[2].total_cmp(&b.tie_box[2]))
        .then(a.tie_box[3].total_cmp(&b.tie_box[3]))
        .then(a.id.cmp(&b.id))
}

/// One ground truth claims one candidate. Ground truths go in order of their
/// best qualifying candidate; each takes its best still-unclaimed candidate.
/// Returns `(gt index, candidate index)` sorted by gt index.
fn greedy_claim<F>(n_cands: usize, n_gts: usize, pref: F) -> Vec<(usize, usize)>
where
    F: Fn(usize, usize) -> Option<Pref>,
{
    let mut ranked: Vec<(usize, Vec<(usize, Pref)>)> = (0..n_gts)
        .map(|g| {
            let mut q: Vec<(usize, Pref)> = (0..n_cands)
                .filter_map(|c| pref(g, c).map(|p| (c, p)))
                .collect();
            q.sort_by(|a, b| pref_cmp(&a.1, &b.1));
            (g, q)
        })
        .filter(|(_, q)| !q.is_empty())
        .collect();
    ranked.sort_by(|a, b| pref_cmp(&a.1[0].1, &b.1[0].1).then(a.0.cmp(&b.0)));

    let mut claimed = vec![false; n_cands];
    let mut out = Vec::new();
    for (g, q) in ranked {
        if let Some(&(c, _)) = q.iter().find(|(c, _)| !claimed[*c]) {
            claimed[c] = true;
            out.push((g, c));
        }
    }
    out.sort_unstable();
    out
}

/// For each ground truth, the highest-scoring candidate with IoU at least
/// `iou_thresh` (or strictly above it when `strict`).
pub(crate) fn score_select(
    cands: &[ScoredProposal],
    gts: &[GroundTruth],
    iou_thresh: f64,
    strict: bool,
) -> Vec<(usize, usize)> {
    greedy_claim(cands.len(), gts.len(), |g, c| {
        let ov = iou(&gts[g].bbox, &cands[c].bbox);
        let ok = if strict { ov > iou_thresh } else { ov >= iou_thresh };
        ok.then(|| Pref {
            primary: cands[c].s0,
            secondary: 0.0,
            tie_box: cands[c].bbox.into(),
            id: cands[c].id,
        })
    })
}

/// Score oracle: per ground truth, the highest-scoring candidate among those
/// overlapping it by at least `iou_thresh`.
pub fn score_oracle(
    cands: &[ScoredProposal],
    gts: &[GroundTruth],
    iou_thresh: f64,
) -> Vec<(usize, usize)> {
    score_select(cands, gts, iou_thresh, false)
}

/// IoU oracle: per ground truth, the candidate overlapping it most (ties by
/// higher score, then lower id). Candidates with zero overlap never qualify.
pub fn iou_oracle(cands: &[ScoredProposal], gts: &[GroundTruth]) -> Vec<(usize, usize)> {
    greedy_claim(cands.len(), gts.len(), |g, c| {
        let ov = iou(&gts[g].bbox, &cands[c].bbox);
        (ov > 0.0).then(|| Pref {
            primary: ov,
            secondary: cands[c].s0,
            tie_box: [0.0; 4],
            id: cands[c].id,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn prop(id: usize, b: [f64; 4], s0: f64) -> ScoredProposal {
        ScoredProposal {
            bbox: BBox::from(b),
            class_id: 0,
            s0,
            feat: Vec::new(),
            id,
        }
    }

    fn abc() -> Vec<ScoredProposal> {
        vec![
            prop(0, [0.0, 0.0, 10.0, 10.0], 0.9),
            prop(1, [1.0, 1.0, 11.0, 11.0], 0.8),
            prop(2, [20.0, 20.0, 30.0, 30.0], 0.7),
        ]
    }

    /// Box of width 10 at the origin whose IoU with `(0,0,10,10)` is `t`.
    fn box_with_iou(t: f64) -> [f64; 4] {
        // Shift horizontally by d: iou = (10-d)/(10+d).
        let d = 10.0 * (1.0 - t) / (1.0 + t);
        [d, 0.0, 10.0 + d, 10.0]
    }

    fn gt0() -> GroundTruth {
        GroundTruth {
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
            class_id: 0,
        }
    }

    #[test]
    fn nms_examples() {
        assert_eq!(nms(&abc(), 0.5), vec![0, 2]);
        assert_eq!(nms(&abc()[..1], 0.5), vec![0]);
        let disjoint = vec![
            prop(0, [0.0, 0.0, 1.0, 1.0], 0.3),
            prop(1, [5.0, 5.0, 6.0, 6.0], 0.4),
        ];
        for t in [0.01, 0.5, 0.99] {
            assert_eq!(nms(&disjoint, t), vec![1, 0]);
        }
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn nms_breaks_score_ties_by_coordinates() {
        let c = vec![
            prop(0, [1.0, 0.0, 11.0, 10.0], 0.5),
            prop(1, [0.0, 0.0, 10.0, 10.0], 0.5),
        ];
        assert_eq!(nms(&c, 0.5), vec![1]);
    }

    #[test]
    fn soft_nms_linear_rescoring() {
        let out = soft_nms(&abc(), &SoftNmsParams::default());
        let b = out.iter().find(|(i, _)| *i == 1).unwrap().1;
        assert!((b - 0.8 * (1.0 - 81.0 / 119.0)).abs() < 1e-12);
        assert!((b - 0.2555).abs() < 1e-4);
        // A and C untouched; B selected last.
        assert_eq!(out.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 2, 1]);
    }

    #[test]
    fn soft_nms_disjoint_is_identity() {
        let c = vec![
            prop(0, [0.0, 0.0, 1.0, 1.0], 0.3),
            prop(1, [5.0, 5.0, 6.0, 6.0], 0.4),
        ];
        for method in [
            SoftNmsMethod::Linear { thresh: 0.5 },
            SoftNmsMethod::Gaussian { sigma: 0.5 },
        ] {
            let out = soft_nms(
                &c,
                &SoftNmsParams {
                    method,
                    score_floor: 0.001,
                },
            );
            assert_eq!(out, vec![(1, 0.4), (0, 0.3)]);
        }
    }

    #[test]
    fn soft_nms_drops_below_floor() {
        let c = vec![
            prop(0, [0.0, 0.0, 10.0, 10.0], 0.9),
            prop(1, [0.0, 0.0, 10.0, 10.5], 0.05),
        ];
        let out = soft_nms(
            &c,
            &SoftNmsParams {
                method: SoftNmsMethod::Linear { thresh: 0.5 },
                score_floor: 0.01,
            },
        );
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn box_vote_examples() {
        let kept = vec![prop(0, [0.0, 0.0, 10.0, 10.0], 0.5)];
        assert_eq!(box_vote(&kept, &kept, 0.5)[0].bbox, kept[0].bbox);

        let voter = prop(1, [2.0, 0.0, 12.0, 10.0], 0.5);
        let pool = vec![kept[0].clone(), voter];
        let out = box_vote(&kept, &pool, 0.5);
        assert_eq!(out[0].bbox, BBox::new(1.0, 0.0, 11.0, 10.0));
        assert_eq!(out[0].s0, 0.5);

        let far = vec![prop(2, [50.0, 50.0, 60.0, 60.0], 0.9)];
        assert_eq!(box_vote(&kept, &far, 0.5)[0].bbox, kept[0].bbox);
    }

    #[test]
    fn no_removal_examples() {
        let c = vec![prop(0, [0.0; 4], 0.3), prop(1, [0.0; 4], 0.05)];
        assert_eq!(no_removal(&c, 0.0), vec![0, 1]);
        assert!(no_removal(&c, 1.0).is_empty());
        assert_eq!(no_removal(&c, 0.1), vec![0]);
    }

    #[test]
    fn score_oracle_examples() {
        let c = vec![
            prop(0, box_with_iou(0.7), 0.6),
            prop(1, box_with_iou(0.6), 0.9),
            prop(2, box_with_iou(0.4), 0.95),
        ];
        assert_eq!(score_oracle(&c, &[gt0()], 0.5), vec![(0, 1)]);
        assert!(score_oracle(&c[2..], &[gt0()], 0.5).is_empty());
        assert_eq!(score_oracle(&c[..1], &[gt0()], 0.5), vec![(0, 0)]);
    }

    #[test]
    fn iou_oracle_examples() {
        let c = vec![prop(0, box_with_iou(0.9), 0.1), prop(1, box_with_iou(0.5), 0.9)];
        assert_eq!(iou_oracle(&c, &[gt0()]), vec![(0, 0)]);

        let far = vec![prop(0, [50.0, 50.0, 60.0, 60.0], 0.9)];
        assert!(iou_oracle(&far, &[gt0()]).is_empty());

        // Same box twice: the tie goes to the higher score.
        let tie = vec![prop(0, box_with_iou(0.6), 0.3), prop(1, box_with_iou(0.6), 0.8)];
        assert_eq!(iou_oracle(&tie, &[gt0()]), vec![(0, 1)]);
    }

    #[test]
    fn oracle_claims_are_exclusive() {
        // Two coincident ground truths, one candidate: only one claim.
        let c = vec![prop(0, [0.0, 0.0, 10.0, 10.0], 0.9)];
        let gts = vec![gt0(), gt0()];
        assert_eq!(score_oracle(&c, &gts, 0.5).len(), 1);
        assert_eq!(iou_oracle(&c, &gts).len(), 1);
    }

    /// Straightforward greedy reference: repeatedly take the best remaining
    /// candidate and delete everything overlapping it.
    pub(crate) fn nms_reference(cands: &[ScoredProposal], thresh: f64) -> Vec<usize> {
        let mut remaining: Vec<usize> = (0..cands.len()).collect();
        let mut kept = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for k in 1..remaining.len() {
                let (a, b) = (&cands[remaining[k]], &cands[remaining[best]]);
                let better = a.s0 > b.s0
                    || (a.s0 == b.s0
                        && (a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2, a.id)
                            < (b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2, b.id));
                if better {
                    best = k;
                }
            }
            let top = remaining.remove(best);
            kept.push(top);
            remaining.retain(|&r| iou(&cands[top].bbox, &cands[r].bbox) <= thresh);
        }
        kept
    }

    fn arb_cands() -> impl Strategy<Value = Vec<ScoredProposal>> {
        prop::collection::vec(
            (0.0..50.0f64, 0.0..50.0f64, 1.0..30.0f64, 1.0..30.0f64, 0u8..20),
            0..40,
        )
        .prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (x, y, w, h, s))| prop(i, [x, y, x + w, y + h], s as f64 / 20.0))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn nms_matches_reference(c in arb_cands(), t in 0.05..0.95f64) {
            prop_assert_eq!(nms(&c, t), nms_reference(&c, t));
        }

        #[test]
        fn nms_output_is_antichain_and_idempotent(c in arb_cands(), t in 0.05..0.95f64) {
            let kept = nms(&c, t);
            for (a, &i) in kept.iter().enumerate() {
                for &j in &kept[a + 1..] {
                    prop_assert!(iou(&c[i].bbox, &c[j].bbox) <= t);
                }
            }
            if !c.is_empty() {
                prop_assert_eq!(kept[0], canonical_order(&c)[0]);
            }
            let sub: Vec<ScoredProposal> = kept.iter().map(|&i| c[i].clone()).collect();
            let again = nms(&sub, t);
            prop_assert_eq!(again, (0..sub.len()).collect::<Vec<_>>());
        }
    }
}
