//! Segmentation and detection metrics.
//!
//! Means over samples are taken after sorting the per-sample values, so
//! every aggregate is bitwise independent of sample order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};

pub const DEFAULT_ACC_THRESHOLD: f64 = 0.5;

/// One scored prediction. A missing `pred_box` scores box IoU 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub pred_mask: Mask,
    pub gt_mask: Mask,
    pub pred_box: Option<BBox>,
    pub gt_box: BBox,
    pub category: String,
    /// Query-length bucket, e.g. `long` / `short` / `referring`.
    pub length: Option<String>,
}

/// Intersection and union pixel counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Overlap {
    pub inter: usize,
    pub union: usize,
    pub pred: usize,
    pub gt: usize,
}

impl Overlap {
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.inter as f64 / self.union as f64
        }
    }

    pub fn dice(&self) -> f64 {
        if self.pred + self.gt == 0 {
            1.0
        } else {
            2.0 * self.inter as f64 / (self.pred + self.gt) as f64
        }
    }
}

pub fn mask_overlap(pred: &Mask, gt: &Mask) -> Result<Overlap> {
    if !pred.same_shape(gt) {
        return Err(Error::ShapeMismatch {
            op: "mask_overlap",
            lhs: vec![pred.height(), pred.width()],
            rhs: vec![gt.height(), gt.width()],
        });
    }
    let mut o = Overlap::default();
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        o.inter += usize::from(p && g);
        o.union += usize::from(p || g);
        o.pred += usize::from(p);
        o.gt += usize::from(g);
    }
    Ok(o)
}

/// `(iou, dice)`; both are 1 when both masks are empty.
pub fn mask_iou_dice(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    let o = mask_overlap(pred, gt)?;
    Ok((o.iou(), o.dice()))
}

fn sorted_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// `(dice, giou, ciou)` as fractions in `[0, 1]`.
pub fn aggregate_seg(samples: &[EvalSample]) -> Result<(f64, f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Empty("aggregate_seg: no samples"));
    }
    let overlaps = samples
        .iter()
        .map(|s| mask_overlap(&s.pred_mask, &s.gt_mask))
        .collect::<Result<Vec<_>>>()?;
    let dice = sorted_mean(overlaps.iter().map(Overlap::dice).collect());
    let giou = sorted_mean(overlaps.iter().map(Overlap::iou).collect());
    let (i, u) = overlaps
        .iter()
        .fold((0usize, 0usize), |(i, u), o| (i + o.inter, u + o.union));
    let ciou = if u == 0 { 1.0 } else { i as f64 / u as f64 };
    Ok((dice, giou, ciou))
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        if a == b {
            1.0
        } else {
            0.0
        }
    } else {
        inter / union
    }
}

fn sample_box_iou(s: &EvalSample) -> f64 {
    s.pred_box.as_ref().map_or(0.0, |p| box_iou(p, &s.gt_box))
}

/// Percentage of samples whose box IoU reaches `threshold`.
pub fn detection_acc(samples: &[EvalSample], threshold: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("detection_acc: no samples"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!(
            "detection_acc: threshold {threshold} outside (0, 1)"
        )));
    }
    let hits = samples
        .iter()
        .filter(|s| sample_box_iou(s) >= threshold)
        .count();
    Ok(100.0 * hits as f64 / samples.len() as f64)
}

/// Tightest box around the set pixels, with pixel edges as coordinates.
pub fn mask2box(mask: &Mask) -> Result<BBox> {
    let (h, w) = (mask.height(), mask.width());
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(Error::EmptyMask);
    }
    BBox::new(
        c0 as f64 / w as f64,
        r0 as f64 / h as f64,
        (c1 + 1) as f64 / w as f64,
        (r1 + 1) as f64 / h as f64,
    )
}

/// One row of a report; every score is a percentage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub count: usize,
    pub dice: f64,
    pub giou: f64,
    pub ciou: f64,
    pub box_iou: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc_threshold: f64,
    pub overall: MetricRow,
    pub per_category: BTreeMap<String, MetricRow>,
    pub per_length: BTreeMap<String, MetricRow>,
}

pub fn metric_row(samples: &[EvalSample], threshold: f64) -> Result<MetricRow> {
    let (dice, giou, ciou) = aggregate_seg(samples)?;
    let box_iou = sorted_mean(samples.iter().map(sample_box_iou).collect());
    Ok(MetricRow {
        count: samples.len(),
        dice: 100.0 * dice,
        giou: 100.0 * giou,
        ciou: 100.0 * ciou,
        box_iou: 100.0 * box_iou,
        acc: detection_acc(samples, threshold)?,
    })
}

pub fn metric_report(samples: &[EvalSample], threshold: f64) -> Result<MetricReport> {
    let overall = metric_row(samples, threshold)?;
    let group =
        |key: &dyn Fn(&EvalSample) -> Option<String>| -> Result<BTreeMap<String, MetricRow>> {
            let mut buckets: BTreeMap<String, Vec<EvalSample>> = BTreeMap::new();
            for s in samples {
                if let Some(k) = key(s) {
                    buckets.entry(k).or_default().push(s.clone());
                }
            }
            buckets
                .into_iter()
                .map(|(k, v)| Ok((k, metric_row(&v, threshold)?)))
                .collect()
        };
    Ok(MetricReport {
        acc_threshold: threshold,
        overall,
        per_category: group(&|s| Some(s.category.clone()))?,
        per_length: group(&|s| s.length.clone())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(a: [f64; 4]) -> BBox {
        BBox::from_array(a).unwrap()
    }

    fn sample(pred: Mask, gt: Mask) -> EvalSample {
        let gt_box = mask2box(&gt).unwrap_or(bx([0.0, 0.0, 1.0, 1.0]));
        EvalSample {
            pred_box: mask2box(&pred).ok(),
            pred_mask: pred,
            gt_mask: gt,
            gt_box,
            category: "c".into(),
            length: None,
        }
    }

    #[test]
    fn identity_and_disjoint() {
        let a = Mask::from_fn(4, 4, |r, _| r < 2);
        let b = Mask::from_fn(4, 4, |r, _| r >= 2);
        assert_eq!(mask_iou_dice(&a, &a).unwrap(), (1.0, 1.0));
        assert_eq!(mask_iou_dice(&a, &b).unwrap(), (0.0, 0.0));
        assert_eq!(
            mask_iou_dice(&Mask::empty(3, 3), &Mask::empty(3, 3)).unwrap(),
            (1.0, 1.0)
        );
        assert!(mask_iou_dice(&a, &Mask::empty(4, 5)).is_err());
    }

    #[test]
    fn giou_vs_ciou() {
        // IoU 1 with union 4, then IoU 0 with union 12.
        let s1 = sample(
            Mask::from_fn(8, 8, |r, c| r < 2 && c < 2),
            Mask::from_fn(8, 8, |r, c| r < 2 && c < 2),
        );
        let s2 = sample(
            Mask::from_fn(8, 8, |r, c| r >= 4 && r < 6 && c < 2),
            Mask::from_fn(8, 8, |r, c| r >= 6 && c < 4),
        );
        let (_, g, c) = aggregate_seg(&[s1.clone(), s2.clone()]).unwrap();
        assert_eq!(g, 0.5);
        assert_eq!(c, 0.25);
        let (_, g1, c1) = aggregate_seg(std::slice::from_ref(&s1)).unwrap();
        assert_eq!(g1, c1);
        assert!(aggregate_seg(&[]).is_err());
    }

    #[test]
    fn box_iou_cases() {
        let a = bx([0.0, 0.0, 1.0, 1.0]);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &bx([0.0, 0.0, 0.5, 1.0])), 0.5);
        let p = bx([0.3, 0.3, 0.3, 0.3]);
        assert_eq!(box_iou(&p, &p), 1.0);
        assert_eq!(box_iou(&p, &bx([0.4, 0.4, 0.4, 0.4])), 0.0);
    }

    #[test]
    fn acc_counts() {
        let gt = Mask::from_fn(10, 10, |r, c| r < 5 && c < 5);
        let good = sample(gt.clone(), gt.clone());
        let bad = sample(Mask::from_fn(10, 10, |r, c| r >= 5 && c >= 5), gt);
        let mut set = vec![good.clone(); 7];
        set.extend(vec![bad.clone(); 3]);
        assert_eq!(detection_acc(&set, 0.5).unwrap(), 70.0);
        assert_eq!(detection_acc(&[good], 0.5).unwrap(), 100.0);
        assert_eq!(detection_acc(&[bad.clone()], 0.5).unwrap(), 0.0);
        assert!(detection_acc(&[bad.clone()], 1.0).is_err());
        let mut missing = bad;
        missing.pred_box = None;
        assert_eq!(detection_acc(&[missing], 0.01).unwrap(), 0.0);
    }

    #[test]
    fn mask2box_cases() {
        let one = Mask::from_fn(4, 4, |r, c| r == 0 && c == 0);
        assert_eq!(mask2box(&one).unwrap().to_array(), [0.0, 0.0, 0.25, 0.25]);
        let full = Mask::from_fn(4, 4, |_, _| true);
        assert_eq!(mask2box(&full).unwrap().to_array(), [0.0, 0.0, 1.0, 1.0]);
        assert!(matches!(
            mask2box(&Mask::empty(4, 4)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn report_groups() {
        let gt = Mask::from_fn(8, 8, |r, c| r < 3 && c < 3);
        let mut a = sample(gt.clone(), gt.clone());
        a.length = Some("long".into());
        let mut b = sample(Mask::empty(8, 8), gt);
        b.category = "d".into();
        let r = metric_report(&[a, b], 0.5).unwrap();
        assert_eq!(r.overall.count, 2);
        assert_eq!(r.per_category["c"].dice, 100.0);
        assert_eq!(r.per_category["d"].dice, 0.0);
        assert_eq!(r.per_length.len(), 1);
        assert_eq!(r.overall.acc, 50.0);
    }
}
