//! Training losses for text, masks, boxes and similarity maps, plus their
//! composition into the end-to-end and fine-tuning objectives.
//!
//! Every loss exists twice: a `*_var` form that records onto a [`Tape`]
//! and a plain form on owned values. The plain forms are thin wrappers
//! around the tape forms so both always agree.

use serde::{Deserialize, Serialize};

use crate::decoders::MaskLogits;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::tensor::{softplus, Tape, Tensor, Var};

pub const DICE_EPS: f64 = 1e-6;
/// Floor on union and enclosing areas so degenerate boxes stay finite.
const AREA_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub l1: f64,
    pub giou: f64,
    pub js: f64,
    pub mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bce: 2.0,
            dice: 0.5,
            l1: 1.0,
            giou: 1.0,
            js: 2.0,
            mse: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.bce, self.dice, self.l1, self.giou, self.js, self.mse];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid(
                "loss weights must be finite and nonnegative",
            ))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskLoss {
    pub bce: f64,
    pub dice: f64,
    pub mask: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxLoss {
    pub l1: f64,
    pub giou: f64,
    pub bbox: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimLoss {
    pub js: f64,
    pub mse: f64,
    pub sim: f64,
}

/// Constituents handed to [`compose_end`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub txt: Option<f64>,
    pub mask: Option<MaskLoss>,
    pub bbox: Option<BoxLoss>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub txt: f64,
    pub bce: f64,
    pub dice: f64,
    pub l1: f64,
    pub giou: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub js: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mse: Option<f64>,
    pub mask: f64,
    pub bbox: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sim: Option<f64>,
    pub total: f64,
}

impl LossReport {
    /// Componentwise sum, used to average reports over a batch.
    pub fn accumulate(&mut self, other: &LossReport) {
        let add_opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (None, None) => None,
            (a, b) => Some(a.unwrap_or(0.0) + b.unwrap_or(0.0)),
        };
        self.txt += other.txt;
        self.bce += other.bce;
        self.dice += other.dice;
        self.l1 += other.l1;
        self.giou += other.giou;
        self.js = add_opt(self.js, other.js);
        self.mse = add_opt(self.mse, other.mse);
        self.mask += other.mask;
        self.bbox += other.bbox;
        self.sim = add_opt(self.sim, other.sim);
        self.total += other.total;
    }

    pub fn scaled(&self, c: f64) -> LossReport {
        let s = |v: f64| v * c;
        LossReport {
            txt: s(self.txt),
            bce: s(self.bce),
            dice: s(self.dice),
            l1: s(self.l1),
            giou: s(self.giou),
            js: self.js.map(s),
            mse: self.mse.map(s),
            mask: s(self.mask),
            bbox: s(self.bbox),
            sim: self.sim.map(s),
            total: s(self.total),
        }
    }
}

/// Next-token targets for a sequence: position `t` predicts `ids[t + 1]`
/// when that token is at index `>= supervise_from`; everything else is masked.
pub fn next_token_targets(ids: &[usize], supervise_from: usize) -> Vec<Option<usize>> {
    (0..ids.len())
        .map(|t| match ids.get(t + 1) {
            Some(&next) if t + 1 >= supervise_from => Some(next),
            _ => None,
        })
        .collect()
}

/// Mean negative log-likelihood over unmasked rows of a `T×V` logit matrix.
pub fn text_ce_var(tape: &mut Tape, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (t, v) = match shape[..] {
        [t, v] => (t, v),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "text_ce",
                lhs: shape,
                rhs: vec![targets.len(), 0],
            })
        }
    };
    if t != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "text_ce",
            lhs: shape,
            rhs: vec![targets.len(), v],
        });
    }
    let count = targets.iter().flatten().count();
    if count == 0 {
        return Err(Error::invalid("text_ce: every position is masked"));
    }
    let mut pick = vec![0.0; t * v];
    for (row, tgt) in targets.iter().enumerate() {
        if let Some(id) = *tgt {
            if id >= v {
                return Err(Error::TokenOutOfVocab { id, vocab: v });
            }
            pick[row * v + id] = -1.0 / count as f64;
        }
    }
    let lsm = tape.log_softmax(logits)?;
    let pick = tape.constant(vec![t, v], pick)?;
    let nll = tape.mul(lsm, pick)?;
    tape.sum(nll)
}

pub fn text_ce_loss(logits: &Tensor, targets: &[Option<usize>]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits)?;
    let loss = text_ce_var(&mut tape, l, targets)?;
    Ok(tape.item(loss))
}

#[derive(Clone, Copy, Debug)]
pub struct MaskLossVars {
    pub bce: Var,
    pub dice: Var,
    pub mask: Var,
}

pub fn mask_loss_var(
    tape: &mut Tape,
    logits: Var,
    gt: &Mask,
    w: &LossWeights,
) -> Result<MaskLossVars> {
    let shape = tape.shape(logits).to_vec();
    if shape != [gt.height(), gt.width()] {
        return Err(Error::ShapeMismatch {
            op: "mask_loss",
            lhs: shape,
            rhs: vec![gt.height(), gt.width()],
        });
    }
    let g = gt.as_f64();
    let sum_g: f64 = g.iter().sum();
    let g = tape.constant(shape, g)?;

    // softplus(x) - x·g is BCE(σ(x), g) without forming log σ.
    let sp = tape.softplus(logits)?;
    let xg = tape.mul(logits, g)?;
    let per_pixel = tape.sub(sp, xg)?;
    let bce = tape.mean(per_pixel)?;

    let p = tape.sigmoid(logits)?;
    let pg = tape.mul(p, g)?;
    let inter = tape.sum(pg)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_EPS)?;
    let sp_sum = tape.sum(p)?;
    let den = tape.add_scalar(sp_sum, sum_g + DICE_EPS)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.neg(ratio)?;
    let dice = tape.add_scalar(neg, 1.0)?;

    let a = tape.scale(bce, w.bce)?;
    let b = tape.scale(dice, w.dice)?;
    let mask = tape.add(a, b)?;
    Ok(MaskLossVars { bce, dice, mask })
}

pub fn mask_loss(pred: &MaskLogits, gt: &Mask, w: &LossWeights) -> Result<MaskLoss> {
    let mut tape = Tape::new();
    let l = tape.leaf(&pred.grid)?;
    let v = mask_loss_var(&mut tape, l, gt, w)?;
    Ok(MaskLoss {
        bce: tape.item(v.bce),
        dice: tape.item(v.dice),
        mask: tape.item(v.mask),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct BoxLossVars {
    pub l1: Var,
    pub giou: Var,
    pub bbox: Var,
}

/// `1 - GIoU` between a `1×4` corner variable and a fixed box.
pub fn giou_loss_var(tape: &mut Tape, pred: Var, gt: &BBox) -> Result<Var> {
    let p: Vec<Var> = (0..4)
        .map(|i| tape.slice(pred, 1, i, i + 1))
        .collect::<Result<_>>()?;
    let g: Vec<Var> = gt
        .to_array()
        .iter()
        .map(|&v| tape.constant(vec![1, 1], vec![v]))
        .collect::<Result<_>>()?;
    let floor = tape.constant(vec![1, 1], vec![AREA_FLOOR])?;

    let ix1 = tape.maximum(p[0], g[0])?;
    let iy1 = tape.maximum(p[1], g[1])?;
    let ix2 = tape.minimum(p[2], g[2])?;
    let iy2 = tape.minimum(p[3], g[3])?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;

    let pw = tape.sub(p[2], p[0])?;
    let ph = tape.sub(p[3], p[1])?;
    let area_p = tape.mul(pw, ph)?;
    let sum_areas = tape.add_scalar(area_p, gt.area())?;
    let union = tape.sub(sum_areas, inter)?;
    let union_safe = tape.maximum(union, floor)?;
    let iou = tape.div(inter, union_safe)?;

    let cx1 = tape.minimum(p[0], g[0])?;
    let cy1 = tape.minimum(p[1], g[1])?;
    let cx2 = tape.maximum(p[2], g[2])?;
    let cy2 = tape.maximum(p[3], g[3])?;
    let cw = tape.sub(cx2, cx1)?;
    let ch = tape.sub(cy2, cy1)?;
    let area_c = tape.mul(cw, ch)?;
    let area_c_safe = tape.maximum(area_c, floor)?;
    let gap = tape.sub(area_c, union)?;
    let penalty = tape.div(gap, area_c_safe)?;

    let giou = tape.sub(iou, penalty)?;
    let neg = tape.neg(giou)?;
    let loss = tape.add_scalar(neg, 1.0)?;
    tape.reshape(loss, vec![1])
}

pub fn bbox_loss_var(
    tape: &mut Tape,
    pred: Var,
    gt: &BBox,
    w: &LossWeights,
) -> Result<BoxLossVars> {
    let shape = tape.shape(pred).to_vec();
    if shape != [1, 4] {
        return Err(Error::ShapeMismatch {
            op: "bbox_loss",
            lhs: shape,
            rhs: vec![1, 4],
        });
    }
    if !gt.is_valid() {
        return Err(Error::invalid(format!(
            "bbox_loss: invalid target box {:?}",
            gt.to_array()
        )));
    }
    let g = tape.constant(vec![1, 4], gt.to_array().to_vec())?;
    let diff = tape.sub(pred, g)?;
    let diff = tape.abs(diff)?;
    let l1 = tape.mean(diff)?;
    let giou = giou_loss_var(tape, pred, gt)?;
    let a = tape.scale(l1, w.l1)?;
    let b = tape.scale(giou, w.giou)?;
    let bbox = tape.add(a, b)?;
    Ok(BoxLossVars { l1, giou, bbox })
}

pub fn bbox_loss(pred: &BBox, gt: &BBox, w: &LossWeights) -> Result<BoxLoss> {
    if !pred.is_valid() {
        return Err(Error::invalid(format!(
            "bbox_loss: invalid predicted box {:?}",
            pred.to_array()
        )));
    }
    let mut tape = Tape::new();
    let p = tape.constant(vec![1, 4], pred.to_array().to_vec())?;
    let v = bbox_loss_var(&mut tape, p, gt, w)?;
    Ok(BoxLoss {
        l1: tape.item(v.l1),
        giou: tape.item(v.giou),
        bbox: tape.item(v.bbox),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct SimLossVars {
    pub js: Var,
    pub mse: Var,
    pub sim: Var,
}

fn log_softmax_plain(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Similarity loss between a predicted `P`-vector and a constant reference.
///
/// With `a = log p`, `b = log q` and `m = (p + q) / 2`, the log-ratio
/// `a - log m` equals `ln 2 - softplus(b - a)`, which stays finite for any
/// logit gap and is exactly zero when the two maps coincide.
pub fn sim_loss_var(
    tape: &mut Tape,
    pred: Var,
    reference: &[f64],
    w: &LossWeights,
) -> Result<SimLossVars> {
    let shape = tape.shape(pred).to_vec();
    if shape != [reference.len()] {
        return Err(Error::ShapeMismatch {
            op: "sim_loss",
            lhs: shape,
            rhs: vec![reference.len()],
        });
    }
    if reference.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "sim_loss" });
    }
    let n = reference.len();
    let ln2 = softplus(0.0);
    let lq_plain = log_softmax_plain(reference);
    let q_plain: Vec<f64> = lq_plain.iter().map(|v| v.exp()).collect();

    let lp = tape.log_softmax(pred)?;
    let p = tape.exp(lp)?;
    let lq = tape.constant(vec![n], lq_plain)?;
    let q = tape.constant(vec![n], q_plain)?;

    let q_minus_p = tape.sub(lq, lp)?;
    let sp_qp = tape.softplus(q_minus_p)?;
    let p_minus_q = tape.neg(q_minus_p)?;
    let sp_pq = tape.softplus(p_minus_q)?;
    let lr_p = tape.neg(sp_qp)?;
    let lr_p = tape.add_scalar(lr_p, ln2)?;
    let lr_q = tape.neg(sp_pq)?;
    let lr_q = tape.add_scalar(lr_q, ln2)?;
    let kp = tape.mul(p, lr_p)?;
    let kq = tape.mul(q, lr_q)?;
    let both = tape.add(kp, kq)?;
    let total = tape.sum(both)?;
    let js = tape.scale(total, 0.5)?;

    let r = tape.constant(vec![n], reference.to_vec())?;
    let d = tape.sub(pred, r)?;
    let d2 = tape.mul(d, d)?;
    let mse = tape.mean(d2)?;

    let a = tape.scale(js, w.js)?;
    let b = tape.scale(mse, w.mse)?;
    let sim = tape.add(a, b)?;
    Ok(SimLossVars { js, mse, sim })
}

pub fn sim_loss(pred: &[f64], reference: &[f64], w: &LossWeights) -> Result<SimLoss> {
    if pred.len() != reference.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "sim_loss",
            lhs: vec![pred.len()],
            rhs: vec![reference.len()],
        });
    }
    let mut tape = Tape::new();
    let p = tape.constant(vec![pred.len()], pred.to_vec())?;
    let v = sim_loss_var(&mut tape, p, reference, w)?;
    Ok(SimLoss {
        js: tape.item(v.js),
        mse: tape.item(v.mse),
        sim: tape.item(v.sim),
    })
}

/// `L_end = L_txt + L_mask + L_bbox`.
pub fn compose_end(parts: &LossParts) -> Result<LossReport> {
    let txt = parts.txt.ok_or(Error::MissingConstituent("txt"))?;
    let mask = parts.mask.ok_or(Error::MissingConstituent("mask"))?;
    let bbox = parts.bbox.ok_or(Error::MissingConstituent("bbox"))?;
    Ok(LossReport {
        txt,
        bce: mask.bce,
        dice: mask.dice,
        l1: bbox.l1,
        giou: bbox.giou,
        js: None,
        mse: None,
        mask: mask.mask,
        bbox: bbox.bbox,
        sim: None,
        total: txt + mask.mask + bbox.bbox,
    })
}

/// `L_ft = L_end + L_sim`.
pub fn compose_ft(end: &LossReport, sim: &SimLoss) -> LossReport {
    LossReport {
        js: Some(sim.js),
        mse: Some(sim.mse),
        sim: Some(sim.sim),
        total: end.total + sim.sim,
        ..*end
    }
}

/// Tape-side total for one sample.
pub fn compose_var(
    tape: &mut Tape,
    txt: Var,
    mask: Var,
    bbox: Var,
    sim: Option<Var>,
) -> Result<Var> {
    let t = tape.add(txt, mask)?;
    let t = tape.add(t, bbox)?;
    match sim {
        Some(s) => tape.add(t, s),
        None => Ok(t),
    }
}
