use super::*;
use crate::attention::HeadGrouping;
use rand::Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        grid_rows: 4,
        grid_cols: 4,
        dim: 16,
        ffn_dim: 32,
        queries: 4,
        sca_queries: 4,
        encoder_layers: 1,
        detection_layers: 1,
        interaction_layers: 2,
        pose_layers: 1,
        ..ModelConfig::desk()
    }
}

fn features(c: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = c.patches() * c.feature_channels;
    Tensor::new(vec![c.patches(), c.feature_channels], (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn pairs() -> Vec<(BBox, BBox)> {
    vec![
        (BBox::new(0.3, 0.4, 0.3, 0.5).unwrap(), BBox::new(0.7, 0.6, 0.2, 0.3).unwrap()),
        (BBox::new(0.6, 0.3, 0.4, 0.4).unwrap(), BBox::new(0.2, 0.8, 0.2, 0.2).unwrap()),
    ]
}

fn run(model: &DirModel, x: &Tensor, mode: Mode, rec: Option<&mut AttentionRecorder>) -> (Tape, ModelOutput) {
    let mut tape = Tape::new();
    let p = Bound::bind(&model.store, &mut tape, false);
    let out = model.forward(&mut tape, &p, x, mode, rec).unwrap();
    (tape, out)
}

fn rows(tape: &Tape, v: Var, n: usize) -> Vec<u64> {
    let t = tape.value(v);
    let (_, c) = t.dims2().unwrap();
    t.data()[..n * c].iter().map(|x| x.to_bits()).collect()
}

#[test]
fn parameter_count_matches_closed_form() {
    let variants = [
        tiny(),
        tiny().baseline(),
        ModelConfig { fusion: Fusion::Late, ..tiny() },
        ModelConfig { use_ipa_mask: false, ..tiny() },
        ModelConfig { use_pose_loss: false, ..tiny() },
        ModelConfig { sca: ScaMode::LearnableQueries, ..tiny() },
        ModelConfig::desk(),
    ];
    for c in variants {
        let m = DirModel::new(c.clone(), 0).unwrap();
        assert_eq!(m.num_params(), DirModel::expected_num_params(&c), "{c:?}");
    }
    let full = DirModel::expected_num_params(&tiny());
    let no_ipe = DirModel::expected_num_params(&ModelConfig { use_ipe: false, ..tiny() });
    assert!(no_ipe < full);
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(DirModel::new(ModelConfig { heads: 7, ..tiny() }, 0).is_err());
    let g = HeadGrouping { human: 1, object: 1, global: 1 };
    assert!(DirModel::new(ModelConfig { grouping: g, ..tiny() }, 0).is_err());
}

#[test]
fn learnable_rows_identical_with_and_without_training_machinery() {
    for fusion in [Fusion::Early, Fusion::Late] {
        let c = ModelConfig { fusion, ..tiny() };
        let m = DirModel::new(c.clone(), 3).unwrap();
        let x = features(&c, 1);
        let gt = pairs();
        let (tt, train) = run(&m, &x, Mode::Train(&gt), None);
        let (ti, infer) = run(&m, &x, Mode::Infer, None);
        assert_eq!(train.n_sca, 2);
        assert!(train.pose_weights.is_some() && infer.pose_weights.is_none());
        let n = c.queries;
        for (a, b) in [
            (train.q_int, infer.q_int),
            (train.c_a, infer.c_a),
            (train.human_boxes, infer.human_boxes),
            (train.object_boxes, infer.object_boxes),
            (train.class_logits, infer.class_logits),
            (train.verb_logits, infer.verb_logits),
            (train.keypoints.unwrap(), infer.keypoints.unwrap()),
        ] {
            assert_eq!(rows(&tt, a, n), rows(&ti, b, n));
        }
    }
}

#[test]
fn zero_gt_pairs_match_inference_exactly() {
    let c = tiny();
    let m = DirModel::new(c.clone(), 4).unwrap();
    let x = features(&c, 2);
    let (tt, train) = run(&m, &x, Mode::Train(&[]), None);
    let (ti, infer) = run(&m, &x, Mode::Infer, None);
    assert_eq!(train.n_sca, 0);
    assert_eq!(tt.value(train.q_int), ti.value(infer.q_int));
    assert_eq!(tt.value(train.verb_logits), ti.value(infer.verb_logits));
}

#[test]
fn masked_rows_attend_only_inside_their_boxes() {
    let c = tiny();
    let m = DirModel::new(c.clone(), 5).unwrap();
    let x = features(&c, 3);
    let gt = pairs();
    let mut rec = AttentionRecorder::enabled(c.grid_rows, c.grid_cols);
    let (_, out) = run(&m, &x, Mode::Train(&gt), Some(&mut rec));
    let masks = out.masks.unwrap();
    for layer in 0..c.interaction_layers {
        for head in 0..c.heads {
            let grids = rec.dump("interaction", layer, head).unwrap();
            for (q, grid) in grids.iter().enumerate() {
                let flat: Vec<f64> = grid.iter().flatten().copied().collect();
                let Some(pair) = masks.get(q) else {
                    assert!((flat.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    continue;
                };
                let mask = match c.grouping.group_of(head) {
                    crate::attention::HeadGroup::Human => &pair.human,
                    crate::attention::HeadGroup::Object => &pair.object,
                    crate::attention::HeadGroup::Global => {
                        assert!(flat.iter().all(|&v| v > 0.0));
                        continue;
                    }
                };
                for (v, &inside) in flat.iter().zip(mask.cells()) {
                    if !inside {
                        assert_eq!(*v, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn all_global_grouping_equals_unmasked_decoder() {
    let c = ModelConfig { grouping: HeadGrouping { human: 0, object: 0, global: 8 }, ..tiny() };
    let mut m = DirModel::new(c.clone(), 6).unwrap();
    let x = features(&c, 4);
    let gt = pairs();
    let (t0, shunted) = run(&m, &x, Mode::Train(&gt), None);
    assert!(shunted.masks.is_some());
    m.config.sca = ScaMode::Off;
    let (t1, plain) = run(&m, &x, Mode::Train(&gt), None);
    assert!(plain.masks.is_none());
    assert_eq!(plain.n_sca, 2);
    assert_eq!(t0.value(shunted.c_a), t1.value(plain.c_a));
}

#[test]
fn encoder_is_finite_deterministic_and_permutation_equivariant() {
    let c = ModelConfig { use_positions: false, ..tiny() };
    let m = DirModel::new(c.clone(), 7).unwrap();
    let enc = |x: &Tensor| {
        let mut tape = Tape::new();
        let p = Bound::bind(&m.store, &mut tape, false);
        let e = m.encode(&mut tape, &p, x).unwrap();
        tape.value(e).clone()
    };
    let zero = Tensor::zeros(&[c.patches(), c.feature_channels]);
    let z = enc(&zero);
    assert_eq!(z.shape(), &[16, 16]);
    assert!(z.data().iter().all(|v| v.is_finite()));
    assert_eq!(z, enc(&zero));

    let x = features(&c, 5);
    let (a, b) = (2, 11);
    let mut swapped = x.clone();
    let f = c.feature_channels;
    for k in 0..f {
        swapped.data_mut().swap(a * f + k, b * f + k);
    }
    let (ex, es) = (enc(&x), enc(&swapped));
    for r in 0..16 {
        let src = if r == a { b } else if r == b { a } else { r };
        for (u, v) in ex.row(src).iter().zip(es.row(r)) {
            assert!((u - v).abs() < 1e-12);
        }
    }
    assert!(m.encode(&mut Tape::new(), &Bound::bind(&m.store, &mut Tape::new(), false), &Tensor::zeros(&[3, 8])).is_err());
}

#[test]
fn box_queries_and_masks() {
    let c = tiny();
    let m = DirModel::new(c.clone(), 8).unwrap();
    let mut tape = Tape::new();
    let p = Bound::bind(&m.store, &mut tape, false);
    let one = &pairs()[..1];
    let (q, masks) = m.build_sca_queries(&mut tape, &p, one).unwrap().unwrap();
    assert_eq!(tape.shape(q), &[1, 16]);
    assert_eq!(masks.len(), 1);
    assert_eq!(masks[0].human, rasterize_mask(&one[0].0, 4, 4));
    assert_eq!(masks[0].object, rasterize_mask(&one[0].1, 4, 4));
    let dup = vec![one[0], one[0]];
    let (q, _) = m.build_sca_queries(&mut tape, &p, &dup).unwrap().unwrap();
    assert_eq!(tape.value(q).row(0), tape.value(q).row(1));
    assert!(m.build_sca_queries(&mut tape, &p, &[]).unwrap().is_none());
    let many = vec![one[0]; 9];
    let (q, _) = m.build_sca_queries(&mut tape, &p, &many).unwrap().unwrap();
    assert_eq!(tape.shape(q)[0], c.sca_queries);
}

#[test]
fn output_ranges() {
    let c = tiny();
    let m = DirModel::new(c.clone(), 9).unwrap();
    let x = features(&c, 6);
    let gt = pairs();
    let (t, out) = run(&m, &x, Mode::Train(&gt), None);
    let kp = t.value(out.keypoints.unwrap());
    assert_eq!(kp.shape(), &[6, 2 * c.keypoints]);
    assert!(kp.data().iter().all(|v| (0.0..=1.0).contains(v)));
    for b in [out.human_boxes, out.object_boxes] {
        assert!(t.value(b).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let w = t.value(out.pose_weights.unwrap());
    for r in 0..6 {
        assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let (t2, out2) = run(&m, &x, Mode::Train(&gt), None);
    assert_eq!(t.value(out.keypoints.unwrap()), t2.value(out2.keypoints.unwrap()));
}

#[test]
fn uniform_pose_logits_give_uniform_weights() {
    let c = tiny();
    let mut m = DirModel::new(c.clone(), 10).unwrap();
    for name in ["ipa.proj.w", "ipa.proj.b"] {
        m.store.by_name_mut(name).unwrap().data_mut().fill(0.0);
    }
    let x = features(&c, 7);
    let (t, out) = run(&m, &x, Mode::Train(&pairs()), None);
    for v in t.value(out.pose_weights.unwrap()).data() {
        assert!((v - 1.0 / c.keypoints as f64).abs() < 1e-15);
    }
}

#[test]
fn zero_fusion_ffn_leaves_appearance_embedding() {
    let c = tiny();
    let mut m = DirModel::new(c.clone(), 11).unwrap();
    for name in ["fuse.1.w", "fuse.1.b"] {
        m.store.by_name_mut(name).unwrap().data_mut().fill(0.0);
    }
    let (t, out) = run(&m, &features(&c, 8), Mode::Infer, None);
    assert_eq!(t.value(out.c_int), t.value(out.c_a));
}

#[test]
fn verb_gradient_reaches_both_decoders() {
    for fusion in [Fusion::Early, Fusion::Late] {
        let c = ModelConfig { fusion, ..tiny() };
        let m = DirModel::new(c.clone(), 12).unwrap();
        let mut tape = Tape::new();
        let p = Bound::bind(&m.store, &mut tape, true);
        let out = m.forward(&mut tape, &p, &features(&c, 9), Mode::Train(&pairs()), None).unwrap();
        let s = tape.sigmoid(out.verb_logits);
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        for prefix in ["int1.ffn.1.w", "pose0.ffn.1.w"] {
            let i = m.store.names().iter().position(|n| n == prefix).unwrap();
            let g = tape.grad(p.vars()[i]).unwrap();
            assert!(g.data().iter().any(|v| *v != 0.0), "{prefix} with {fusion}");
        }
    }
}

#[test]
fn baseline_has_no_auxiliary_outputs() {
    let c = tiny().baseline();
    let m = DirModel::new(c.clone(), 13).unwrap();
    let (_, out) = run(&m, &features(&c, 10), Mode::Train(&pairs()), None);
    assert_eq!(out.n_sca, 0);
    assert!(out.keypoints.is_none() && out.pose_weights.is_none() && out.masks.is_none());
    assert_eq!(out.c_int, out.c_a);
}

#[test]
fn predicted_box_modes_build_masks_from_the_detection_heads() {
    let c = ModelConfig { sca: ScaMode::PredictedBoxes, ..tiny() };
    let m = DirModel::new(c.clone(), 14).unwrap();
    let (t, out) = run(&m, &features(&c, 11), Mode::Train(&pairs()), None);
    let masks = out.masks.as_ref().unwrap();
    assert_eq!(masks.masked_rows(), 2);
    let hb = BBox::from_slice(t.value(out.human_boxes).row(4)).clamped();
    assert_eq!(masks.get(4).unwrap().human, rasterize_mask(&hb, 4, 4));

    let c = ModelConfig { sca: ScaMode::LearnableQueries, ..tiny() };
    let m = DirModel::new(c.clone(), 14).unwrap();
    let (_, out) = run(&m, &features(&c, 11), Mode::Train(&pairs()), None);
    assert_eq!(out.n_sca, 0);
    assert_eq!(out.masks.unwrap().masked_rows(), c.queries);
    let (_, out) = run(&m, &features(&c, 11), Mode::Infer, None);
    assert!(out.masks.is_none());
}
