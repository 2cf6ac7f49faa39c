//! COCO-protocol average precision for boxes and masks.
//!
//! Per image and category, detections are matched greedily in descending
//! score order to the best still-unmatched ground truth at each IoU
//! threshold. Ground truth outside the area range is ignored, as are
//! detections matched to it and unmatched detections whose own area falls
//! outside the range. Precision is made monotone and sampled at 101 recall
//! points.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mask::{BBox, Mask};

pub const MAX_DETS: usize = 100;
pub const AREA_ALL: (f64, f64) = (0.0, 1e10);
pub const AREA_SMALL: (f64, f64) = (0.0, 1024.0);
pub const AREA_MEDIUM: (f64, f64) = (1024.0, 9216.0);
pub const AREA_LARGE: (f64, f64) = (9216.0, 1e10);

/// `0.50, 0.55, …, 0.95`
pub fn iou_thresholds() -> Vec<f64> {
    let step = (0.95 - 0.5) / 9.0;
    let mut t: Vec<f64> = (0..10).map(|i| 0.5 + i as f64 * step).collect();
    t[9] = 0.95;
    t
}

/// `0.00, 0.01, …, 1.00`
pub fn recall_thresholds() -> Vec<f64> {
    let mut r: Vec<f64> = (0..101).map(|i| i as f64 * 0.01).collect();
    r[100] = 1.0;
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouType {
    Bbox,
    Segm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: u64,
    pub category: usize,
    pub bbox: BBox,
    pub mask: Option<Mask>,
    /// Pixel area used for range filtering (mask area when a mask exists).
    pub area: f64,
}

impl GroundTruth {
    pub fn from_mask(image_id: u64, category: usize, mask: Mask) -> Option<Self> {
        let bbox = mask.bbox()?;
        let area = mask.area() as f64;
        Some(Self {
            image_id,
            category,
            bbox,
            mask: Some(mask),
            area,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_id: u64,
    pub category: usize,
    pub score: f64,
    pub bbox: BBox,
    pub mask: Option<Mask>,
}

impl Prediction {
    fn area(&self, iou_type: IouType) -> f64 {
        match (iou_type, &self.mask) {
            (IouType::Segm, Some(m)) => m.area() as f64,
            _ => self.bbox.area(),
        }
    }
}

fn pair_iou(p: &Prediction, g: &GroundTruth, iou_type: IouType) -> Result<f64> {
    match iou_type {
        IouType::Bbox => Ok(p.bbox.iou(&g.bbox)),
        IouType::Segm => match (&p.mask, &g.mask) {
            (Some(a), Some(b)) => a.iou(b),
            _ => crate::error::shape_err("mask AP needs masks on predictions and ground truth"),
        },
    }
}

/// Matching outcome of one (image, category) pair at every threshold.
struct ImageEval {
    scores: Vec<f64>,
    /// `[t][d]`
    matched: Vec<Vec<bool>>,
    ignored: Vec<Vec<bool>>,
    num_gt_kept: usize,
}

fn outside(area: f64, range: (f64, f64)) -> bool {
    area < range.0 || area > range.1
}

fn evaluate_image(
    preds: &[&Prediction],
    gts: &[&GroundTruth],
    thresholds: &[f64],
    area: (f64, f64),
    iou_type: IouType,
) -> Result<ImageEval> {
    let mut gt_order: Vec<usize> = (0..gts.len()).collect();
    gt_order.sort_by_key(|&g| outside(gts[g].area, area));
    let gts: Vec<&GroundTruth> = gt_order.iter().map(|&g| gts[g]).collect();
    let gt_ignore: Vec<bool> = gts.iter().map(|g| outside(g.area, area)).collect();

    let mut dt_order: Vec<usize> = (0..preds.len()).collect();
    dt_order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    dt_order.truncate(MAX_DETS);
    let dts: Vec<&Prediction> = dt_order.iter().map(|&d| preds[d]).collect();

    let mut ious = vec![0.0; dts.len() * gts.len()];
    for (d, p) in dts.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            ious[d * gts.len() + g] = pair_iou(p, gt, iou_type)?;
        }
    }
    let mut matched = vec![vec![false; dts.len()]; thresholds.len()];
    let mut ignored = vec![vec![false; dts.len()]; thresholds.len()];
    for (ti, &t) in thresholds.iter().enumerate() {
        let mut gt_taken = vec![false; gts.len()];
        for d in 0..dts.len() {
            let mut best = t.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for g in 0..gts.len() {
                if gt_taken[g] {
                    continue;
                }
                if let Some(mg) = m {
                    if !gt_ignore[mg] && gt_ignore[g] {
                        break;
                    }
                }
                if ious[d * gts.len() + g] < best {
                    continue;
                }
                best = ious[d * gts.len() + g];
                m = Some(g);
            }
            if let Some(g) = m {
                gt_taken[g] = true;
                matched[ti][d] = true;
                ignored[ti][d] = gt_ignore[g];
            } else {
                ignored[ti][d] = outside(dts[d].area(iou_type), area);
            }
        }
    }
    Ok(ImageEval {
        scores: dts.iter().map(|p| p.score).collect(),
        matched,
        ignored,
        num_gt_kept: gt_ignore.iter().filter(|i| !**i).count(),
    })
}

/// 101-point interpolated precision from per-detection outcomes already
/// sorted by descending score.
fn interpolated_ap(tp_flags: &[bool], num_gt: usize) -> f64 {
    let nd = tp_flags.len();
    let mut precision = Vec::with_capacity(nd);
    let mut recall = Vec::with_capacity(nd);
    let (mut tp, mut fp) = (0usize, 0usize);
    for &is_tp in tp_flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..nd).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let thresholds = recall_thresholds();
    let mut sum = 0.0;
    for r in &thresholds {
        let idx = recall.partition_point(|&x| x < *r);
        if idx < nd {
            sum += precision[idx];
        }
    }
    sum / thresholds.len() as f64
}

/// AP for each category and threshold: `[category][threshold]`, NaN where
/// the category has no (non-ignored) ground truth.
pub fn ap_table(
    preds: &[Prediction],
    gts: &[GroundTruth],
    thresholds: &[f64],
    area: (f64, f64),
    iou_type: IouType,
) -> Result<Vec<Vec<f64>>> {
    let mut categories: Vec<usize> = gts.iter().map(|g| g.category).chain(preds.iter().map(|p| p.category)).collect();
    categories.sort_unstable();
    categories.dedup();
    let mut images: Vec<u64> = gts.iter().map(|g| g.image_id).chain(preds.iter().map(|p| p.image_id)).collect();
    images.sort_unstable();
    images.dedup();

    let mut table = Vec::with_capacity(categories.len());
    for &cat in &categories {
        let mut evals = Vec::new();
        for &img in &images {
            let p: Vec<&Prediction> = preds.iter().filter(|p| p.image_id == img && p.category == cat).collect();
            let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.image_id == img && g.category == cat).collect();
            if p.is_empty() && g.is_empty() {
                continue;
            }
            evals.push(evaluate_image(&p, &g, thresholds, area, iou_type)?);
        }
        let num_gt: usize = evals.iter().map(|e| e.num_gt_kept).sum();
        let mut row = Vec::with_capacity(thresholds.len());
        for ti in 0..thresholds.len() {
            if num_gt == 0 {
                row.push(f64::NAN);
                continue;
            }
            // (score, tp, ignored) across images, stable by image order
            let mut all: Vec<(f64, bool, bool)> = Vec::new();
            for e in &evals {
                for d in 0..e.scores.len() {
                    all.push((e.scores[d], e.matched[ti][d], e.ignored[ti][d]));
                }
            }
            all.sort_by(|a, b| b.0.total_cmp(&a.0));
            let flags: Vec<bool> = all.iter().filter(|x| !x.2).map(|x| x.1).collect();
            row.push(interpolated_ap(&flags, num_gt));
        }
        table.push(row);
    }
    Ok(table)
}

/// Mean AP over categories and thresholds, ignoring undefined entries; NaN
/// when nothing is defined.
pub fn compute_ap(
    preds: &[Prediction],
    gts: &[GroundTruth],
    thresholds: &[f64],
    area: (f64, f64),
    iou_type: IouType,
) -> Result<f64> {
    let table = ap_table(preds, gts, thresholds, area, iou_type)?;
    let valid: Vec<f64> = table.iter().flatten().copied().filter(|v| !v.is_nan()).collect();
    Ok(if valid.is_empty() {
        f64::NAN
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    })
}

/// Box and mask AP summary, each value in [0, 1] (NaN if undefined).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map_b: f64,
    pub ap50_b: f64,
    pub ap75_b: f64,
    pub map_s: f64,
    pub ap50_s: f64,
    pub ap75_s: f64,
    pub ap_s_small: f64,
    pub ap_s_medium: f64,
    pub ap_s_large: f64,
}

impl EvalResult {
    /// Values ×100 in field order, for display.
    pub fn percent(&self) -> [f64; 9] {
        [
            self.map_b,
            self.ap50_b,
            self.ap75_b,
            self.map_s,
            self.ap50_s,
            self.ap75_s,
            self.ap_s_small,
            self.ap_s_medium,
            self.ap_s_large,
        ]
        .map(|v| 100.0 * v)
    }
}

pub fn evaluate(preds: &[Prediction], gts: &[GroundTruth]) -> Result<EvalResult> {
    let t = iou_thresholds();
    let b = |th: &[f64], area| compute_ap(preds, gts, th, area, IouType::Bbox);
    let s = |th: &[f64], area| compute_ap(preds, gts, th, area, IouType::Segm);
    Ok(EvalResult {
        map_b: b(&t, AREA_ALL)?,
        ap50_b: b(&[0.5], AREA_ALL)?,
        ap75_b: b(&[0.75], AREA_ALL)?,
        map_s: s(&t, AREA_ALL)?,
        ap50_s: s(&[0.5], AREA_ALL)?,
        ap75_s: s(&[0.75], AREA_ALL)?,
        ap_s_small: s(&t, AREA_SMALL)?,
        ap_s_medium: s(&t, AREA_MEDIUM)?,
        ap_s_large: s(&t, AREA_LARGE)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: usize, y: usize, s: usize) -> Mask {
        Mask::from_fn(32, 32, |yy, xx| (y..y + s).contains(&yy) && (x..x + s).contains(&xx))
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gts: Vec<GroundTruth> = [(0, 0, 5), (10, 10, 12), (3, 20, 8)]
            .iter()
            .enumerate()
            .map(|(i, &(x, y, s))| GroundTruth::from_mask(1 + i as u64 % 2, i % 2, square(x, y, s)).unwrap())
            .collect();
        let preds: Vec<Prediction> = gts
            .iter()
            .map(|g| Prediction {
                image_id: g.image_id,
                category: g.category,
                score: 1.0,
                bbox: g.bbox,
                mask: g.mask.clone(),
            })
            .collect();
        let r = evaluate(&preds, &gts).unwrap();
        for v in [r.map_b, r.ap50_b, r.ap75_b, r.map_s, r.ap50_s, r.ap75_s, r.ap_s_small] {
            assert_eq!(v, 1.0);
        }
        assert!(r.ap_s_medium.is_nan() && r.ap_s_large.is_nan());
    }

    #[test]
    fn missing_predictions_score_zero_and_empty_is_nan() {
        let gts = vec![GroundTruth::from_mask(1, 0, square(2, 2, 6)).unwrap()];
        assert_eq!(compute_ap(&[], &gts, &iou_thresholds(), AREA_ALL, IouType::Segm).unwrap(), 0.0);
        assert!(compute_ap(&[], &[], &iou_thresholds(), AREA_ALL, IouType::Segm).unwrap().is_nan());
    }

    #[test]
    fn hand_worked_two_predictions() {
        let g = GroundTruth {
            image_id: 1,
            category: 0,
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
            mask: None,
            area: 100.0,
        };
        // IoU 0.9: width 9 inside; IoU 0.2: 2x10 strip
        let p1 = Prediction { image_id: 1, category: 0, score: 0.9, bbox: BBox::new(0.0, 0.0, 9.0, 10.0), mask: None };
        let p2 = Prediction { image_id: 1, category: 0, score: 0.8, bbox: BBox::new(0.0, 0.0, 2.0, 10.0), mask: None };
        assert!((p1.bbox.iou(&g.bbox) - 0.9).abs() < 1e-12);
        assert!((p2.bbox.iou(&g.bbox) - 0.2).abs() < 1e-12);
        let preds = [p1, p2];
        assert!((compute_ap(&preds, &[g.clone()], &[0.5], AREA_ALL, IouType::Bbox).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(compute_ap(&preds, &[g], &[0.95], AREA_ALL, IouType::Bbox).unwrap(), 0.0);
    }

    #[test]
    fn rectangle_masks_match_box_iou() {
        let a = square(2, 3, 10);
        let b = square(6, 5, 9);
        let ba = a.bbox().unwrap();
        let bb = b.bbox().unwrap();
        assert!((a.iou(&b).unwrap() - ba.iou(&bb)).abs() < 1e-12);
    }

    #[test]
    fn zero_score_duplicate_never_helps() {
        let gts = vec![
            GroundTruth::from_mask(1, 0, square(0, 0, 8)).unwrap(),
            GroundTruth::from_mask(1, 0, square(16, 16, 8)).unwrap(),
        ];
        let p = Prediction { image_id: 1, category: 0, score: 0.7, bbox: gts[0].bbox, mask: gts[0].mask.clone() };
        let dup = Prediction { score: 0.0, ..p.clone() };
        let t = iou_thresholds();
        let base = compute_ap(&[p.clone()], &gts, &t, AREA_ALL, IouType::Segm).unwrap();
        let with = compute_ap(&[p, dup], &gts, &t, AREA_ALL, IouType::Segm).unwrap();
        assert!(with <= base);
    }

    #[test]
    fn ap50_dominates_ap75() {
        let gts = vec![GroundTruth::from_mask(1, 0, square(0, 0, 10)).unwrap()];
        let m = square(0, 0, 8);
        let p = Prediction { image_id: 1, category: 0, score: 0.5, bbox: m.bbox().unwrap(), mask: Some(m) };
        let a50 = compute_ap(&[p.clone()], &gts, &[0.5], AREA_ALL, IouType::Segm).unwrap();
        let a75 = compute_ap(&[p], &gts, &[0.75], AREA_ALL, IouType::Segm).unwrap();
        assert!(a50 >= a75);
        assert_eq!(a50, 1.0);
        assert_eq!(a75, 0.0);
    }
}
