//! Set-prediction losses for the learnable and box-coordinate query groups,
//! the weighted pose loss and their weighted total.

use thiserror::Error;

use crate::geometry::BBox;
use crate::matching::{hungarian, matching_cost, CostWeights, GtPair, MatchError, MatchResult, Predictions};
use crate::model::{ModelConfig, ModelOutput};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("loss term {0} is not finite")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_b: f64,
    pub lambda_u: f64,
    pub lambda_c: f64,
    pub lambda_a: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Classification weight of queries matched to nothing.
    pub background_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            lambda_b: 2.5,
            lambda_u: 1.0,
            lambda_c: 1.0,
            lambda_a: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            background_weight: 0.1,
        }
    }
}

impl LossWeights {
    pub fn cost_weights(&self) -> CostWeights {
        CostWeights {
            boxes: self.lambda_b,
            giou: self.lambda_u,
            class: self.lambda_c,
            verb: self.lambda_a,
            focal_alpha: self.focal_alpha,
            focal_gamma: self.focal_gamma,
        }
    }

    pub fn combine(&self, l_l: f64, l_s: f64, l_p: f64) -> f64 {
        self.alpha * l_l + self.beta * l_s + self.gamma * l_p
    }
}

/// Reads rows `rows` of the prediction tensors as plain values.
pub fn predictions(tape: &Tape, out: &ModelOutput, rows: std::ops::Range<usize>) -> Predictions {
    let boxes = |v: Var| rows.clone().map(|r| BBox::from_slice(tape.value(v).row(r))).collect::<Vec<_>>();
    let cl = tape.value(out.class_logits);
    let vl = tape.value(out.verb_logits);
    Predictions {
        human: boxes(out.human_boxes),
        object: boxes(out.object_boxes),
        class_probs: rows.clone().map(|r| softmax_row(cl.row(r))).collect(),
        verb_probs: rows.map(|r| vl.row(r).iter().map(|&x| sigmoid(x)).collect()).collect(),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_row(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Hungarian matching of the ground truth to the learnable query rows.
pub fn match_learnable(tape: &Tape, out: &ModelOutput, gt: &[GtPair], w: &LossWeights) -> Result<MatchResult> {
    let pred = predictions(tape, out, 0..out.n_learnable);
    Ok(hungarian(&matching_cost(&pred, gt, &w.cost_weights()))?)
}

/// The four weighted terms of one query group.
#[derive(Debug, Clone, Copy)]
pub struct SetTerms {
    pub boxes: Var,
    pub giou: Var,
    pub class: Var,
    pub verb: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub learnable: SetTerms,
    pub sca: Option<SetTerms>,
    pub pose: Option<Var>,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub total: f64,
    pub l_l: f64,
    pub l_s: f64,
    pub l_p: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |x: Var| tape.value(x).item();
        LossValues {
            total: v(self.total),
            l_l: v(self.learnable.total),
            l_s: self.sca.map_or(0.0, |s| v(s.total)),
            l_p: self.pose.map_or(0.0, v),
        }
    }

    /// Names the first term, in evaluation order, whose value is not finite.
    pub fn check_finite(&self, tape: &Tape) -> Result<()> {
        let mut named: Vec<(String, Var)> = Vec::new();
        for (group, terms) in [("L_l", Some(self.learnable)), ("L_s", self.sca)] {
            if let Some(t) = terms {
                for (n, v) in [("boxes", t.boxes), ("giou", t.giou), ("class", t.class), ("verb", t.verb)] {
                    named.push((format!("{group}.{n}"), v));
                }
            }
        }
        if let Some(p) = self.pose {
            named.push(("L_p".into(), p));
        }
        named.push(("total".into(), self.total));
        for (name, v) in named {
            if !tape.value(v).item().is_finite() {
                return Err(LossError::NonFinite(name));
            }
        }
        Ok(())
    }
}

/// `Σ (1 − GIoU)` over matching rows of two `[m × 4]` center-format boxes.
pub fn giou_loss_sum(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let corners = |tape: &mut Tape, b: Var| -> Result<[Var; 4]> {
        let cx = tape.slice_cols(b, 0, 1)?;
        let cy = tape.slice_cols(b, 1, 2)?;
        let w = tape.slice_cols(b, 2, 3)?;
        let h = tape.slice_cols(b, 3, 4)?;
        let hw = tape.scale(w, 0.5);
        let hh = tape.scale(h, 0.5);
        Ok([tape.sub(cx, hw)?, tape.sub(cy, hh)?, tape.add(cx, hw)?, tape.add(cy, hh)?])
    };
    let [ax0, ay0, ax1, ay1] = corners(tape, pred)?;
    let [bx0, by0, bx1, by1] = corners(tape, gt)?;
    let area = |tape: &mut Tape, x0, y0, x1, y1| -> Result<Var> {
        let w = tape.sub(x1, x0)?;
        let h = tape.sub(y1, y0)?;
        Ok(tape.mul(w, h)?)
    };
    let area_a = area(tape, ax0, ay0, ax1, ay1)?;
    let area_b = area(tape, bx0, by0, bx1, by1)?;
    let ix0 = tape.maximum(ax0, bx0)?;
    let iy0 = tape.maximum(ay0, by0)?;
    let ix1 = tape.minimum(ax1, bx1)?;
    let iy1 = tape.minimum(ay1, by1)?;
    let iw = tape.sub(ix1, ix0)?;
    let iw = tape.clamp_min(iw, 0.0);
    let ih = tape.sub(iy1, iy0)?;
    let ih = tape.clamp_min(ih, 0.0);
    let inter = tape.mul(iw, ih)?;
    let sum = tape.add(area_a, area_b)?;
    let union = tape.sub(sum, inter)?;
    let union = tape.clamp_min(union, 1e-12);
    let iou = tape.div(inter, union)?;
    let ex0 = tape.minimum(ax0, bx0)?;
    let ey0 = tape.minimum(ay0, by0)?;
    let ex1 = tape.maximum(ax1, bx1)?;
    let ey1 = tape.maximum(ay1, by1)?;
    let enclose = area(tape, ex0, ey0, ex1, ey1)?;
    let enclose = tape.clamp_min(enclose, 1e-12);
    let gap = tape.sub(enclose, union)?;
    let penalty = tape.div(gap, enclose)?;
    let giou = tape.sub(iou, penalty)?;
    let s = tape.sum(giou);
    let m = tape.shape(pred)[0] as f64;
    let neg = tape.scale(s, -1.0);
    Ok(tape.add_scalar(neg, m))
}

fn box_tensor(boxes: impl Iterator<Item = BBox>) -> Tensor {
    let data: Vec<f64> = boxes.flat_map(|b| b.to_array()).collect();
    let n = data.len() / 4;
    Tensor::new(vec![n, 4], data).expect("consistent shape")
}

/// Loss of the query rows `rows`, where `matched` lists `(row, gt)` pairs with
/// row indices relative to the group start.
pub fn set_loss(
    tape: &mut Tape,
    out: &ModelOutput,
    rows: std::ops::Range<usize>,
    matched: &[(usize, usize)],
    gt: &[GtPair],
    w: &LossWeights,
) -> Result<SetTerms> {
    let norm = gt.len().max(1) as f64;
    let start = rows.start;
    let idx: Vec<usize> = matched.iter().map(|&(r, _)| start + r).collect();

    let (boxes, giou) = if idx.is_empty() {
        (tape.constant(Tensor::scalar(0.0)), tape.constant(Tensor::scalar(0.0)))
    } else {
        let mut l1 = Vec::new();
        let mut gl = Vec::new();
        for (pred, pick) in [(out.human_boxes, 0), (out.object_boxes, 1)] {
            let p = tape.gather_rows(pred, &idx)?;
            let g = tape.constant(box_tensor(matched.iter().map(|&(_, g)| if pick == 0 { gt[g].human } else { gt[g].object })));
            let d = tape.sub(p, g)?;
            l1.push(tape.abs_sum(d));
            gl.push(giou_loss_sum(tape, p, g)?);
        }
        let l1 = tape.add(l1[0], l1[1])?;
        let gl = tape.add(gl[0], gl[1])?;
        (tape.scale(l1, 1.0 / norm), tape.scale(gl, 1.0 / norm))
    };

    let n_rows = rows.len();
    let background = tape.shape(out.class_logits)[1] - 1;
    let mut targets = vec![background; n_rows];
    let mut weights = vec![w.background_weight; n_rows];
    for &(r, g) in matched {
        targets[r] = gt[g].class;
        weights[r] = 1.0;
    }
    let logits = tape.slice_rows(out.class_logits, rows.start, rows.end)?;
    let ce = tape.cross_entropy(logits, &targets, &weights)?;
    let wsum: f64 = weights.iter().sum();
    let class = tape.scale(ce, 1.0 / wsum);

    let verb = if idx.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let v = tape.gather_rows(out.verb_logits, &idx)?;
        let n_verbs = tape.shape(v)[1];
        let mut t = vec![0.0; idx.len() * n_verbs];
        for (i, &(_, g)) in matched.iter().enumerate() {
            for &verb in &gt[g].verbs {
                t[i * n_verbs + verb] = 1.0;
            }
        }
        let t = Tensor::new(vec![idx.len(), n_verbs], t)?;
        let f = tape.sigmoid_focal(v, &t, w.focal_alpha, w.focal_gamma)?;
        tape.scale(f, 1.0 / norm)
    };

    let parts = [
        tape.scale(boxes, w.lambda_b),
        tape.scale(giou, w.lambda_u),
        tape.scale(class, w.lambda_c),
        tape.scale(verb, w.lambda_a),
    ];
    let mut total = parts[0];
    for p in &parts[1..] {
        total = tape.add(total, *p)?;
    }
    Ok(SetTerms { boxes, giou, class, verb, total })
}

/// `(1/N) Σ_i Σ_k M_ik (|Δx_ik| + |Δy_ik|)` over the matched rows, where
/// `keypoints` is `[N × 2K]`, `weights` is `[N × K]` (or all ones when
/// `None`) and `N` is `n_rows`.
pub fn pose_loss(
    tape: &mut Tape,
    keypoints: Var,
    weights: Option<Var>,
    matched: &[(usize, usize)],
    gt: &[GtPair],
    n_rows: usize,
) -> Result<Var> {
    if matched.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let idx: Vec<usize> = matched.iter().map(|&(r, _)| r).collect();
    let k2 = tape.shape(keypoints)[1];
    let k = k2 / 2;
    let p = tape.gather_rows(keypoints, &idx)?;
    let target: Vec<f64> = matched.iter().flat_map(|&(_, g)| gt[g].keypoints.iter().flat_map(|p| *p)).collect();
    let target = tape.constant(Tensor::new(vec![idx.len(), k2], target)?);
    let d = tape.sub(p, target)?;
    let d = tape.abs(d);
    let mut fold = vec![0.0; k2 * k];
    for j in 0..k {
        fold[(2 * j) * k + j] = 1.0;
        fold[(2 * j + 1) * k + j] = 1.0;
    }
    let fold = tape.constant(Tensor::new(vec![k2, k], fold)?);
    let per_kp = tape.matmul(d, fold)?;
    let weighted = match weights {
        Some(m) => {
            let m = tape.gather_rows(m, &idx)?;
            tape.mul(per_kp, m)?
        }
        None => per_kp,
    };
    let s = tape.sum(weighted);
    Ok(tape.scale(s, 1.0 / n_rows as f64))
}

/// Assembles every loss term of one scene. `matching` assigns ground-truth
/// pairs to learnable rows; box-coordinate row `i` is tied to pair `i`.
pub fn total_loss(
    tape: &mut Tape,
    out: &ModelOutput,
    gt: &[GtPair],
    matching: &MatchResult,
    config: &ModelConfig,
    w: &LossWeights,
) -> Result<LossTerms> {
    let n_l = out.n_learnable;
    let learn_pairs = matching.by_query();
    let learnable = set_loss(tape, out, 0..n_l, &learn_pairs, gt, w)?;

    let sca = if out.n_sca > 0 {
        let sca_gt = &gt[..out.n_sca];
        let pairs: Vec<(usize, usize)> = (0..out.n_sca).map(|i| (i, i)).collect();
        Some(set_loss(tape, out, n_l..n_l + out.n_sca, &pairs, sca_gt, w)?)
    } else {
        None
    };

    let pose = match (config.use_ipe && config.use_pose_loss, out.keypoints) {
        (true, Some(kp)) => Some(pose_loss(tape, kp, out.pose_weights, &learn_pairs, gt, n_l)?),
        _ => None,
    };

    let mut total = tape.scale(learnable.total, w.alpha);
    if let Some(s) = sca {
        let s = tape.scale(s.total, w.beta);
        total = tape.add(total, s)?;
    }
    if let Some(p) = pose {
        let p = tape.scale(p, w.gamma);
        total = tape.add(total, p)?;
    }
    Ok(LossTerms { learnable, sca, pose, total })
}
