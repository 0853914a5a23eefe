//! Interaction-detection mean average precision and keypoint error.
//!
//! A detection is a true positive when both its human and object boxes reach
//! IoU 0.5 against a not-yet-claimed ground-truth pair of the same category in
//! the same scene. Detections are claimed greedily in descending confidence
//! and AP is the all-point area under the interpolated precision envelope.

use std::collections::BTreeMap;
use std::fmt;

use crate::data::{all_categories, Category, Scene, NUM_VERBS, VERB_NAMES};
use crate::geometry::{iou, BBox};
use crate::losses::{match_learnable, predictions, LossWeights};
use crate::matching::{scene_targets, GtPair, Predictions};
use crate::model::{DirModel, Mode, ModelError};
use crate::nn::Bound;
use crate::tensor::Tape;

pub const IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_TOP_K: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoiTriplet {
    pub human: BBox,
    pub object: BBox,
    pub class: usize,
    pub verb: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Every category over every scene.
    Default,
    /// Each category only over scenes containing its object class.
    KnownObject,
}

/// Ground truth of one scene as seen by the evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGt {
    pub pairs: Vec<GtPair>,
    pub classes_present: Vec<usize>,
}

impl SceneGt {
    pub fn from_scene(s: &Scene) -> Self {
        let mut classes: Vec<usize> = s.objects.iter().map(|o| o.class).collect();
        classes.sort_unstable();
        classes.dedup();
        Self { pairs: scene_targets(s), classes_present: classes }
    }
}

/// Candidate triplets of one scene: every (query, verb) with confidence
/// `max non-background class probability × verb probability`, the best `k`
/// kept. Ties keep the lower query index, then the lower verb index.
pub fn score_triplets(pred: &Predictions, k: usize) -> Vec<HoiTriplet> {
    let mut out = Vec::with_capacity(pred.len() * NUM_VERBS);
    for q in 0..pred.len() {
        let probs = &pred.class_probs[q];
        let fg = &probs[..probs.len() - 1];
        let mut class = 0;
        for (c, &p) in fg.iter().enumerate() {
            if p > fg[class] {
                class = c;
            }
        }
        for (verb, &vp) in pred.verb_probs[q].iter().enumerate() {
            out.push(HoiTriplet { human: pred.human[q], object: pred.object[q], class, verb, score: fg[class] * vp });
        }
    }
    // stable sort keeps (query, verb) order among equal scores
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(k);
    out
}

/// All-point interpolated AP from per-detection hit flags sorted by
/// descending confidence.
pub fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(hits.len());
    let mut rec = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        if *r > last_r {
            ap += (r - last_r) * p;
            last_r = *r;
        }
    }
    ap
}

/// Greedy true-positive flags for detections of one category, in the order
/// given (callers sort by confidence). `dets` holds `(scene, triplet)`.
pub fn greedy_hits(dets: &[(usize, HoiTriplet)], gts: &[SceneGt], cat: Category) -> Vec<bool> {
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.pairs.len()]).collect();
    dets.iter()
        .map(|(s, t)| {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in gts[*s].pairs.iter().enumerate() {
                if claimed[*s][i] || g.class != cat.1 || !g.verbs.contains(&cat.0) {
                    continue;
                }
                let overlap = iou(&t.human, &g.human).min(iou(&t.object, &g.object));
                if overlap >= IOU_THRESHOLD && best.is_none_or(|(_, b)| overlap > b) {
                    best = Some((i, overlap));
                }
            }
            match best {
                Some((i, _)) => {
                    claimed[*s][i] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn in_pool(g: &SceneGt, cat: Category, mode: EvalMode) -> bool {
    mode == EvalMode::Default || g.classes_present.contains(&cat.1)
}

/// Ground-truth instance count of `cat` over the pool of `mode`.
pub fn gt_count(gts: &[SceneGt], cat: Category, mode: EvalMode) -> usize {
    gts.iter()
        .filter(|g| in_pool(g, cat, mode))
        .map(|g| g.pairs.iter().filter(|p| p.class == cat.1 && p.verbs.contains(&cat.0)).count())
        .sum()
}

/// AP of one category, or `None` when it has no ground truth in the pool.
/// Equal scores rank by scene, then by position in the scene list.
pub fn category_ap(preds: &[Vec<HoiTriplet>], gts: &[SceneGt], cat: Category, mode: EvalMode) -> Option<f64> {
    let n_gt = gt_count(gts, cat, mode);
    if n_gt == 0 {
        return None;
    }
    let mut dets: Vec<(usize, HoiTriplet)> = preds
        .iter()
        .enumerate()
        .filter(|(s, _)| in_pool(&gts[*s], cat, mode))
        .flat_map(|(s, ts)| ts.iter().filter(|t| t.verb == cat.0 && t.class == cat.1).map(move |t| (s, *t)))
        .collect();
    dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    Some(average_precision(&greedy_hits(&dets, gts, cat), n_gt))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModeReport {
    pub ap: BTreeMap<Category, f64>,
    pub full: Option<f64>,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn evaluate(preds: &[Vec<HoiTriplet>], gts: &[SceneGt], mode: EvalMode, rare: &[Category]) -> ModeReport {
    assert_eq!(preds.len(), gts.len(), "one prediction list per scene");
    let ap: BTreeMap<Category, f64> =
        all_categories().into_iter().filter_map(|c| category_ap(preds, gts, c, mode).map(|a| (c, a))).collect();
    ModeReport {
        full: mean(ap.values().copied()),
        rare: mean(ap.iter().filter(|(c, _)| rare.contains(c)).map(|(_, a)| *a)),
        non_rare: mean(ap.iter().filter(|(c, _)| !rare.contains(c)).map(|(_, a)| *a)),
        ap,
    }
}

/// Mean absolute keypoint coordinate error over matched people.
/// `matched` lists `(query, gt)`; `keypoints[q]` is `[x0, y0, x1, y1, ...]`.
pub fn keypoint_error(keypoints: &[Vec<f64>], gt: &[GtPair], matched: &[(usize, usize)]) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for &(q, g) in matched {
        for (k, p) in gt[g].keypoints.iter().enumerate() {
            total += (keypoints[q][2 * k] - p[0]).abs() + (keypoints[q][2 * k + 1] - p[1]).abs();
            n += 2;
        }
    }
    (n > 0).then(|| total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub default: ModeReport,
    pub known_object: ModeReport,
    pub keypoint_error: Option<f64>,
}

/// Runs inference on `scenes` and scores them in both modes. Keypoint error
/// uses the ground-truth keypoints of people matched by the set matcher.
pub fn evaluate_model(model: &DirModel, scenes: &[Scene], rare: &[Category], top_k: usize) -> Result<EvalReport, ModelError> {
    let w = LossWeights::default();
    let mut preds = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    let (mut kp_sum, mut kp_n) = (0.0, 0usize);
    for s in scenes {
        let mut tape = Tape::new();
        let p = Bound::bind(&model.store, &mut tape, false);
        let out = model.forward(&mut tape, &p, &s.feature_tensor(), Mode::Infer, None)?;
        preds.push(score_triplets(&predictions(&tape, &out, 0..out.n_learnable), top_k));
        let gt = SceneGt::from_scene(s);
        if let Some(kp) = out.keypoints {
            let mut truth = gt.pairs.clone();
            for (t, pair) in truth.iter_mut().zip(&s.pairs) {
                t.keypoints = s.persons[pair.person].keypoints.points.clone();
            }
            let m = match_learnable(&tape, &out, &truth, &w).map_err(|e| ModelError::Input(e.to_string()))?;
            let rows: Vec<Vec<f64>> = (0..out.n_learnable).map(|r| tape.value(kp).row(r).to_vec()).collect();
            if let Some(e) = keypoint_error(&rows, &truth, &m.by_query()) {
                kp_sum += e;
                kp_n += 1;
            }
        }
        gts.push(gt);
    }
    Ok(EvalReport {
        default: evaluate(&preds, &gts, EvalMode::Default, rare),
        known_object: evaluate(&preds, &gts, EvalMode::KnownObject, rare),
        keypoint_error: (kp_n > 0).then(|| kp_sum / kp_n as f64),
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl EvalReport {
    /// Flat `key = value` records.
    pub fn records(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (tag, m) in [("dt", &self.default), ("ko", &self.known_object)] {
            let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.9}"));
            out.push((format!("{tag}.full"), opt(m.full)));
            out.push((format!("{tag}.rare"), opt(m.rare)));
            out.push((format!("{tag}.non_rare"), opt(m.non_rare)));
            for ((v, c), ap) in &m.ap {
                out.push((format!("{tag}.ap.{}.{c}", VERB_NAMES[*v]), format!("{ap:.9}")));
            }
        }
        if let Some(e) = self.keypoint_error {
            out.push(("keypoint_error".into(), format!("{e:.9}")));
        }
        out
    }

    pub fn records_text(&self) -> String {
        self.records().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>8} {:>8} {:>8}", "mode", "full", "rare", "non-rare")?;
        for (tag, m) in [("DT", &self.default), ("KO", &self.known_object)] {
            writeln!(f, "{:<8} {:>8} {:>8} {:>8}", tag, pct(m.full), pct(m.rare), pct(m.non_rare))?;
        }
        writeln!(f)?;
        writeln!(f, "{:<10} {:>5} {:>8} {:>8}", "verb", "class", "AP(DT)", "AP(KO)")?;
        for (cat, ap) in &self.default.ap {
            let ko = self.known_object.ap.get(cat).copied();
            writeln!(f, "{:<10} {:>5} {:>8} {:>8}", VERB_NAMES[cat.0], cat.1, pct(Some(*ap)), pct(ko))?;
        }
        if let Some(e) = self.keypoint_error {
            writeln!(f, "\nkeypoint L1 error {e:.4}")?;
        }
        Ok(())
    }
}
