use dirhoi::data::{all_categories, Category};
use dirhoi::evaluation::*;
use dirhoi::geometry::{iou, BBox};
use dirhoi::matching::{GtPair, Predictions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gt(h: BBox, o: BBox, class: usize, verbs: Vec<usize>) -> GtPair {
    GtPair { human: h, object: o, class, verbs, keypoints: vec![[0.5, 0.5]; 5] }
}

fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    BBox::new(cx, cy, w, h).unwrap()
}

fn trip(h: BBox, o: BBox, class: usize, verb: usize, score: f64) -> HoiTriplet {
    HoiTriplet { human: h, object: o, class, verb, score }
}

#[test]
fn single_correct_detection_scores_one() {
    let (h, o) = (b(0.3, 0.3, 0.2, 0.3), b(0.6, 0.6, 0.1, 0.1));
    let gts = vec![SceneGt { pairs: vec![gt(h, o, 1, vec![2])], classes_present: vec![1] }];
    let preds = vec![vec![trip(h, o, 1, 2, 0.9)]];
    assert_eq!(category_ap(&preds, &gts, (2, 1), EvalMode::Default), Some(1.0));
    let r = evaluate(&preds, &gts, EvalMode::Default, &[]);
    assert_eq!(r.full, Some(1.0));
    assert_eq!(r.rare, None);
}

#[test]
fn low_human_overlap_is_a_miss() {
    let (h, o) = (b(0.3, 0.3, 0.2, 0.3), b(0.6, 0.6, 0.1, 0.1));
    // equal boxes shifted by dx overlap (w - dx) / (w + dx)
    let moved = BBox { cx: h.cx + 0.2 * 0.7 / 1.3, ..h };
    assert!((iou(&moved, &h) - 0.3).abs() < 1e-9);
    let gts = vec![SceneGt { pairs: vec![gt(h, o, 0, vec![1])], classes_present: vec![0] }];
    let preds = vec![vec![trip(moved, o, 0, 1, 0.9)]];
    assert_eq!(category_ap(&preds, &gts, (1, 0), EvalMode::Default), Some(0.0));
}

#[test]
fn categories_without_ground_truth_are_excluded() {
    let (h, o) = (b(0.3, 0.3, 0.2, 0.3), b(0.6, 0.6, 0.1, 0.1));
    let gts = vec![SceneGt { pairs: vec![gt(h, o, 0, vec![0])], classes_present: vec![0] }];
    let preds = vec![vec![trip(h, o, 0, 0, 0.9), trip(h, o, 2, 1, 0.8)]];
    let r = evaluate(&preds, &gts, EvalMode::Default, &[]);
    assert_eq!(r.ap.len(), 1);
    assert_eq!(r.full, Some(1.0));
}

// Explicit threshold sweep: for every distinct confidence, re-run greedy
// matching on the detections at or above it.
fn sweep_ap(preds: &[Vec<HoiTriplet>], gts: &[SceneGt], cat: Category, mode: EvalMode) -> Option<f64> {
    let pool = |s: usize| mode == EvalMode::Default || gts[s].classes_present.contains(&cat.1);
    let is_gt = |g: &GtPair| g.class == cat.1 && g.verbs.contains(&cat.0);
    let n_gt: usize = (0..gts.len()).filter(|&s| pool(s)).map(|s| gts[s].pairs.iter().filter(|g| is_gt(g)).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut dets = Vec::new();
    for (s, ts) in preds.iter().enumerate() {
        if pool(s) {
            for t in ts.iter().filter(|t| t.verb == cat.0 && t.class == cat.1) {
                dets.push((s, *t));
            }
        }
    }
    let mut thresholds: Vec<f64> = dets.iter().map(|d| d.1.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    let mut points = Vec::new();
    for &tau in &thresholds {
        let mut kept: Vec<(usize, HoiTriplet)> = dets.iter().copied().filter(|d| d.1.score >= tau).collect();
        kept.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.pairs.len()]).collect();
        let mut tp = 0;
        for (s, t) in &kept {
            let mut best = None;
            let mut best_ov = -1.0;
            for (i, g) in gts[*s].pairs.iter().enumerate() {
                if used[*s][i] || !is_gt(g) {
                    continue;
                }
                let ov = iou(&t.human, &g.human).min(iou(&t.object, &g.object));
                if ov >= 0.5 && ov > best_ov {
                    best_ov = ov;
                    best = Some(i);
                }
            }
            if let Some(i) = best {
                used[*s][i] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / kept.len() as f64));
    }
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    recalls.sort_by(|a, b| a.total_cmp(b));
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}

fn jitter(rng: &mut ChaCha8Rng, bx: &BBox, amount: f64) -> BBox {
    let w = (bx.w * (1.0 + rng.gen_range(-amount..amount))).max(0.02);
    let h = (bx.h * (1.0 + rng.gen_range(-amount..amount))).max(0.02);
    BBox::new(bx.cx + rng.gen_range(-amount..amount) * bx.w, bx.cy + rng.gen_range(-amount..amount) * bx.h, w, h).unwrap()
}

fn micro_case(rng: &mut ChaCha8Rng) -> (Vec<Vec<HoiTriplet>>, Vec<SceneGt>) {
    let n_scenes = rng.gen_range(1..=2);
    let mut gts = Vec::new();
    let mut preds = vec![Vec::new(); n_scenes];
    let mut all_gt = Vec::new();
    for s in 0..n_scenes {
        let n = rng.gen_range(0..=3usize.min(3 - all_gt.len().min(3)));
        let mut pairs = Vec::new();
        for _ in 0..n {
            let h = b(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3));
            let o = b(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3));
            let g = gt(h, o, rng.gen_range(0..2), vec![rng.gen_range(0..2)]);
            all_gt.push((s, g.clone()));
            pairs.push(g);
        }
        let mut classes: Vec<usize> = pairs.iter().map(|p| p.class).collect();
        if rng.gen_bool(0.3) {
            classes.push(2);
        }
        classes.sort_unstable();
        classes.dedup();
        gts.push(SceneGt { pairs, classes_present: classes });
    }
    let n_pred = rng.gen_range(1..=5);
    for _ in 0..n_pred {
        let score = rng.gen_range(0.0..1.0);
        if !all_gt.is_empty() && rng.gen_bool(0.7) {
            let (s, g) = all_gt[rng.gen_range(0..all_gt.len())].clone();
            let t = trip(jitter(rng, &g.human, 0.2), jitter(rng, &g.object, 0.2), g.class, g.verbs[0], score);
            preds[s].push(t);
        } else {
            let s = rng.gen_range(0..n_scenes);
            let h = b(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), 0.2, 0.2);
            preds[s].push(trip(h, h, rng.gen_range(0..3), rng.gen_range(0..2), score));
        }
    }
    (preds, gts)
}

#[test]
fn ap_matches_threshold_sweep_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut nontrivial = 0;
    for _ in 0..200 {
        let (preds, gts) = micro_case(&mut rng);
        for mode in [EvalMode::Default, EvalMode::KnownObject] {
            for cat in all_categories() {
                let a = category_ap(&preds, &gts, cat, mode);
                let o = sweep_ap(&preds, &gts, cat, mode);
                match (a, o) {
                    (Some(x), Some(y)) => {
                        assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
                        if x > 0.0 && x < 1.0 {
                            nontrivial += 1;
                        }
                    }
                    (None, None) => {}
                    _ => panic!("exclusion mismatch"),
                }
            }
        }
    }
    assert!(nontrivial > 10);
}

#[test]
fn modes_agree_when_every_scene_has_every_class() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..50 {
        let (preds, mut gts) = micro_case(&mut rng);
        for g in &mut gts {
            g.classes_present = vec![0, 1, 2];
        }
        assert_eq!(evaluate(&preds, &gts, EvalMode::Default, &[]), evaluate(&preds, &gts, EvalMode::KnownObject, &[]));
    }
}

#[test]
fn known_object_mode_drops_scenes_without_the_class() {
    let (h, o) = (b(0.3, 0.3, 0.2, 0.3), b(0.6, 0.6, 0.1, 0.1));
    let gts = vec![
        SceneGt { pairs: vec![gt(h, o, 0, vec![0])], classes_present: vec![0] },
        SceneGt { pairs: vec![], classes_present: vec![1] },
    ];
    let preds = vec![vec![trip(h, o, 0, 0, 0.5)], vec![trip(h, o, 0, 0, 0.9)]];
    assert_eq!(category_ap(&preds, &gts, (0, 0), EvalMode::Default), Some(0.5));
    assert_eq!(category_ap(&preds, &gts, (0, 0), EvalMode::KnownObject), Some(1.0));
}

fn preds_one(class: Vec<f64>, verbs: Vec<f64>) -> Predictions {
    let x = b(0.5, 0.5, 0.2, 0.2);
    Predictions { human: vec![x], object: vec![x], class_probs: vec![class], verb_probs: vec![verbs] }
}

#[test]
fn triplet_scores() {
    let t = score_triplets(&preds_one(vec![1.0, 0.0, 0.0, 0.0], vec![0.5, 0.0, 0.0, 0.0, 0.0, 0.0]), 32);
    assert_eq!(t[0].score, 0.5);
    assert_eq!((t[0].class, t[0].verb), (0, 0));
    assert_eq!(t.len(), 6);

    let x = b(0.5, 0.5, 0.2, 0.2);
    let p = Predictions {
        human: vec![x; 3],
        object: vec![x; 3],
        class_probs: vec![vec![0.5, 0.2, 0.1, 0.2]; 3],
        verb_probs: vec![vec![0.4; 6]; 3],
    };
    let t = score_triplets(&p, 4);
    assert_eq!(t.len(), 4);
    assert!(t.iter().all(|t| t.score == 0.2));
    // equal scores: query 0's verbs 0..3 come first
    assert_eq!(t.iter().map(|t| t.verb).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
}

#[test]
fn triplet_scores_match_raw_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..20 {
        let cl: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let vl: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z: f64 = cl.iter().map(|v| v.exp()).sum();
        let probs: Vec<f64> = cl.iter().map(|v| v.exp() / z).collect();
        let sig: Vec<f64> = vl.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let best = (0..3).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap();
        let t = score_triplets(&preds_one(dirhoi::losses::softmax_row(&cl), vl.iter().map(|&v| dirhoi::losses::sigmoid(v)).collect()), 32);
        for tr in &t {
            assert_eq!(tr.class, best);
            assert!((tr.score - probs[best] * sig[tr.verb]).abs() < 1e-12);
        }
    }
}

#[test]
fn keypoint_error_cases() {
    let mut g = gt(b(0.5, 0.5, 0.2, 0.2), b(0.5, 0.5, 0.2, 0.2), 0, vec![0]);
    g.keypoints = vec![[0.1, 0.2], [0.3, 0.4], [0.5, 0.6], [0.7, 0.8], [0.9, 0.1]];
    let exact: Vec<f64> = g.keypoints.iter().flatten().copied().collect();
    assert_eq!(keypoint_error(&[exact.clone()], &[g.clone()], &[(0, 0)]), Some(0.0));
    let mut off = exact.clone();
    off[6] += 0.2;
    let e = keypoint_error(&[off.clone()], &[g.clone()], &[(0, 0)]).unwrap();
    assert!((e - 0.2 / 10.0).abs() < 1e-12);
    let mut g2 = g.clone();
    g2.keypoints[0] = [0.0, 0.0];
    let mut other = exact.clone();
    other[0] = 0.05;
    let a = keypoint_error(&[off.clone(), other.clone()], &[g.clone(), g2.clone()], &[(0, 0), (1, 1)]).unwrap();
    let b_ = keypoint_error(&[other, off], &[g2, g], &[(0, 0), (1, 1)]).unwrap();
    assert!((a - b_).abs() < 1e-15);
    assert_eq!(keypoint_error(&[], &[], &[]), None);
}

#[test]
fn report_text_and_records() {
    let (h, o) = (b(0.3, 0.3, 0.2, 0.3), b(0.6, 0.6, 0.1, 0.1));
    let gts = vec![SceneGt { pairs: vec![gt(h, o, 1, vec![2])], classes_present: vec![1] }];
    let preds = vec![vec![trip(h, o, 1, 2, 0.9)]];
    let rep = EvalReport {
        default: evaluate(&preds, &gts, EvalMode::Default, &[]),
        known_object: evaluate(&preds, &gts, EvalMode::KnownObject, &[]),
        keypoint_error: Some(0.01),
    };
    let text = rep.to_string();
    assert!(text.contains("DT") && text.contains("100.00"));
    let rec = rep.records_text();
    assert!(rec.contains("dt.full = 1.000000000"));
    assert!(rec.contains("dt.rare = nan"));
    assert!(rec.contains("dt.ap.watch.1 = 1.000000000"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adding_a_top_detection_for_an_undetected_pair_never_lowers_ap(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut preds, gts) = micro_case(&mut rng);
        let before = evaluate(&preds, &gts, EvalMode::Default, &[]);
        // a pair no existing detection of its category could claim
        let reachable = |s: usize, g: &GtPair| {
            preds[s].iter().any(|t| {
                g.class == t.class && g.verbs.contains(&t.verb) && iou(&t.human, &g.human).min(iou(&t.object, &g.object)) >= 0.5
            })
        };
        let target = gts
            .iter()
            .enumerate()
            .flat_map(|(s, g)| g.pairs.iter().map(move |p| (s, p.clone())))
            .find(|(s, p)| !reachable(*s, p));
        if let Some((s, g)) = target {
            preds[s].push(trip(g.human, g.object, g.class, g.verbs[0], 2.0));
            let after = evaluate(&preds, &gts, EvalMode::Default, &[]);
            for (cat, ap) in &before.ap {
                prop_assert!(after.ap[cat] >= *ap - 1e-12, "{:?}: {} -> {}", cat, ap, after.ap[cat]);
            }
        }
    }
}
