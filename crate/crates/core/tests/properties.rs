use proptest::prelude::*;

use cdc_core::cdc::{cdc_forward, CdcLayerSpec, CdcWeights};
use cdc_core::data::{decode_tensor, encode_tensor, load_detections, save_detections};
use cdc_core::eval::{average_precision, localization_map, segment_iou, GroundTruthInstance};
use cdc_core::localize::{
    extend_proposal, kde_threshold, nms, refine_boundaries, Detection, ProposalSegment,
    RefineParams,
};
use cdc_core::ops::conv3d::{conv3d_forward, Conv3dSpec};
use cdc_core::ops::softmax::{framewise_softmax, softmax_loss, FrameLabels, ScoreMatrix};
use cdc_core::tensor::unravel_index;
use cdc_core::{linear_index, FillRule, Shape, Tensor};

fn seeded(dims: &[usize], seed: u64) -> Tensor {
    Tensor::filled(
        dims,
        FillRule::SeededUniform {
            lo: -1.0,
            hi: 1.0,
            seed,
        },
    )
    .unwrap()
}

fn interval() -> impl Strategy<Value = (usize, usize)> {
    (0usize..60, 0usize..20).prop_map(|(s, len)| (s, s + len))
}

/// One action class over `frames`: `hi` on the plateau, `lo` elsewhere.
fn step_scores(frames: usize, plateau: (usize, usize), hi: f32, lo: f32) -> ScoreMatrix {
    let data = (0..frames)
        .flat_map(|t| {
            let p = if t >= plateau.0 && t <= plateau.1 {
                hi
            } else {
                lo
            };
            [p, 1.0 - p]
        })
        .collect();
    ScoreMatrix::new(frames, 2, data).unwrap()
}

fn naive_conv3d(x: &Tensor, w: &Tensor, b: &Tensor, spec: &Conv3dSpec) -> Vec<f64> {
    let d = x.dims();
    let out = spec.output_extents([d[1], d[2], d[3]]).unwrap();
    let mut y = Vec::new();
    for co in 0..spec.out_channels {
        for ol in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    let mut acc = b.data()[co] as f64;
                    for ci in 0..spec.in_channels {
                        for a in 0..spec.kernel[0] {
                            for bb in 0..spec.kernel[1] {
                                for c in 0..spec.kernel[2] {
                                    let pos = [
                                        (ol * spec.stride[0] + a) as isize
                                            - spec.padding[0] as isize,
                                        (oh * spec.stride[1] + bb) as isize
                                            - spec.padding[1] as isize,
                                        (ow * spec.stride[2] + c) as isize
                                            - spec.padding[2] as isize,
                                    ];
                                    if pos
                                        .iter()
                                        .zip(&d[1..])
                                        .any(|(&p, &n)| p < 0 || p >= n as isize)
                                    {
                                        continue;
                                    }
                                    let xi =
                                        [ci, pos[0] as usize, pos[1] as usize, pos[2] as usize];
                                    acc += w.get(&[co, ci, a, bb, c]).unwrap() as f64
                                        * x.get(&xi).unwrap() as f64;
                                }
                            }
                        }
                    }
                    y.push(acc);
                }
            }
        }
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_index_is_a_bijection(dims in prop::collection::vec(1usize..5, 1..5)) {
        let shape = Shape::new(dims.clone()).unwrap();
        let n: usize = dims.iter().product();
        let mut seen = vec![false; n];
        for off in 0..n {
            let coords = unravel_index(&shape, off).unwrap();
            let back = linear_index(&shape, &coords).unwrap();
            prop_assert_eq!(back, off);
            prop_assert!(!seen[back]);
            seen[back] = true;
        }
        prop_assert!(linear_index(&shape, &dims).is_err());
    }

    #[test]
    fn tensor_encoding_round_trips_bit_exactly(
        dims in prop::collection::vec(1usize..5, 1..5),
        seed in any::<u64>(),
    ) {
        let mut t = seeded(&dims, seed);
        t.data_mut()[0] = -0.0;
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        prop_assert_eq!(back.dims(), t.dims());
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn conv3d_matches_naive_loops(
        cin in 1usize..4, cout in 1usize..4,
        ext in prop::array::uniform3(1usize..7),
        k in prop::array::uniform3(1usize..4),
        stride in prop::array::uniform3(1usize..3),
        pad in prop::array::uniform3(0usize..2),
        seed in any::<u64>(),
    ) {
        let spec = Conv3dSpec { in_channels: cin, out_channels: cout, kernel: k, stride, padding: pad };
        prop_assume!(spec.output_extents(ext).is_ok());
        let x = seeded(&[cin, ext[0], ext[1], ext[2]], seed);
        let w = seeded(&spec.weight_dims(), seed ^ 1);
        let b = seeded(&[cout], seed ^ 2);
        let y = conv3d_forward(&x, &w, &b, &spec).unwrap();
        let want = naive_conv3d(&x, &w, &b, &spec);
        prop_assert_eq!(y.len(), want.len());
        for (a, b) in y.data().iter().zip(&want) {
            prop_assert!((*a as f64 - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(
        classes in 2usize..6, frames in 1usize..10, shift in -20.0f32..20.0, seed in any::<u64>(),
    ) {
        let logits = seeded(&[classes, frames], seed);
        let p = framewise_softmax(&logits).unwrap();
        for t in 0..frames {
            let sum: f64 = p.row(t).iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-5);
        }
        let shifted: Vec<f32> = logits.data().iter().map(|v| v + shift).collect();
        let q = framewise_softmax(&Tensor::from_vec(&[classes, frames], shifted).unwrap()).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
        let labels = FrameLabels::new((0..frames).map(|t| t % classes).collect());
        prop_assert!(softmax_loss(&[p], &[labels]).unwrap() >= 0.0);
    }

    #[test]
    fn cdc_parameter_count(cin in 1usize..8, cout in 1usize..8, k in prop::array::uniform3(1usize..5)) {
        let spec = CdcLayerSpec::new(cin, cout, k, 1, 0);
        prop_assert_eq!(spec.param_count(), cout * (cin * k[0] * k[1] * k[2] + 1));
        prop_assert_eq!(CdcWeights::zeros(&spec).unwrap().param_count(), spec.param_count());
    }

    #[test]
    fn cdc_output_length_rule(
        kl in 1usize..6, l in 1usize..9, seed in any::<u64>(), sp in (0usize..6, 0usize..6),
    ) {
        let s = 1 + sp.0 % kl;
        let p = sp.1 % kl;
        let spec = CdcLayerSpec::new(2, 3, [kl, 2, 2], s, p);
        let want = ((l - 1) * s + kl) as isize - 2 * p as isize;
        match spec.output_length(l) {
            Ok(n) => {
                prop_assert_eq!(n as isize, want);
                let w = CdcWeights::glorot(&spec, seed).unwrap();
                let y = cdc_forward(&seeded(&[2, l, 2, 2], seed), &w, &spec).unwrap();
                prop_assert_eq!(y.dims(), &[3, n, 1, 1][..]);
            }
            Err(_) => prop_assert!(want < 1),
        }
    }

    #[test]
    fn iou_is_symmetric_bounded_and_identity(a in interval(), b in interval()) {
        let ab = segment_iou(a, b);
        prop_assert_eq!(ab, segment_iou(b, a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(segment_iou(a, a), 1.0);
        prop_assert_eq!(ab == 1.0, a == b);
    }

    #[test]
    fn ap_invariant_under_monotone_transform(
        items in prop::collection::vec((0u32..20, any::<bool>()), 1..20),
    ) {
        let relevant = items.iter().filter(|i| i.1).count();
        let base: Vec<(f64, bool)> = items.iter().map(|&(s, r)| (s as f64, r)).collect();
        let mapped: Vec<(f64, bool)> = items.iter().map(|&(s, r)| ((s as f64 * 0.3).exp() - 7.0, r)).collect();
        prop_assert_eq!(average_precision(&base, relevant), average_precision(&mapped, relevant));
    }

    #[test]
    fn localization_map_non_increasing_in_threshold(
        gt in prop::collection::vec((interval(), 0usize..2), 0..8),
        dets in prop::collection::vec((interval(), 0usize..2, 0u32..8), 0..12),
    ) {
        let gt: Vec<GroundTruthInstance> =
            gt.iter().map(|&((s, e), c)| GroundTruthInstance::new("v", s, e, c).unwrap()).collect();
        let dets: Vec<Detection> = dets
            .iter()
            .map(|&((start, end), label, s)| Detection { video: "v".into(), start, end, label, score: s as f64 })
            .collect();
        let mut prev = f64::INFINITY;
        for thr in [0.05, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
            let m = localization_map(&dets, &gt, thr, 2).unwrap().map;
            prop_assert!(m <= prev);
            prev = m;
        }
    }

    #[test]
    fn nms_ignores_input_order(
        dets in prop::collection::vec((interval(), 0usize..2, 0u32..4), 0..12),
        rot in 0usize..12,
        thr in 0.1f64..0.9,
    ) {
        let dets: Vec<Detection> = dets
            .iter()
            .map(|&((start, end), label, s)| Detection { video: "v".into(), start, end, label, score: s as f64 })
            .collect();
        let mut shuffled = dets.clone();
        shuffled.reverse();
        if !shuffled.is_empty() {
            let r = rot % shuffled.len();
            shuffled.rotate_left(r);
        }
        prop_assert_eq!(nms(&dets, thr), nms(&shuffled, thr));
    }

    #[test]
    fn refined_detection_stays_in_extended_range_and_scores_its_mean(
        frames in 20usize..60,
        levels in prop::collection::vec(0u8..=10, 60),
        prop in (0usize..60, 0usize..20),
        alpha in 0.0f64..0.5,
    ) {
        let data = (0..frames).flat_map(|t| { let p = levels[t] as f32 / 10.0; [p, 1.0 - p] }).collect();
        let scores = ScoreMatrix::new(frames, 2, data).unwrap();
        let start = prop.0 % frames;
        let end = (start + prop.1).min(frames - 1);
        let proposal = ProposalSegment { video: "v".into(), start, end, score: None };
        let params = RefineParams::for_video(frames, alpha);
        let (es, ee) = extend_proposal(start, end, &params);
        if let Some(d) = refine_boundaries(&proposal, &scores, &params).unwrap() {
            prop_assert!(es <= d.start && d.start <= d.end && d.end <= ee);
            let mean = (d.start..=d.end).map(|t| scores.get(t, d.label) as f64).sum::<f64>()
                / (d.end - d.start + 1) as f64;
            prop_assert!((d.score - mean).abs() <= 1e-6);
            let column: Vec<f32> = (es..=ee).map(|t| scores.get(t, d.label)).collect();
            let beta = kde_threshold(&column).unwrap().beta;
            if column.iter().all(|&v| v as f64 >= beta) {
                prop_assert_eq!((d.start, d.end), (es, ee));
            }
        }
    }

    /// Idempotence holds for step profiles; a ramp is a counterexample in
    /// general since the KDE threshold of the shrunk range is higher.
    #[test]
    fn refinement_is_idempotent_on_step_profiles(
        frames in 20usize..60,
        plateau in (0usize..60, 1usize..30),
        prop in (0usize..60, 0usize..30),
        hi in 6u8..=10, lo in 0u8..4,
    ) {
        let ps = plateau.0 % frames;
        let pe = (ps + plateau.1).min(frames - 1);
        let scores = step_scores(frames, (ps, pe), hi as f32 / 10.0, lo as f32 / 10.0);
        let start = prop.0 % frames;
        let end = (start + prop.1).min(frames - 1);
        let params = RefineParams::for_video(frames, 0.0);
        let first = refine_boundaries(&ProposalSegment { video: "v".into(), start, end, score: None }, &scores, &params).unwrap();
        if let Some(d) = first {
            let again = ProposalSegment { video: "v".into(), start: d.start, end: d.end, score: None };
            let second = refine_boundaries(&again, &scores, &params).unwrap().unwrap();
            prop_assert_eq!((second.start, second.end), (d.start, d.end));
        }
    }

    #[test]
    fn detections_round_trip(
        dets in prop::collection::vec((interval(), 0usize..5, any::<f64>().prop_filter("finite", |v| v.is_finite())), 0..40),
    ) {
        let dets: Vec<Detection> = dets
            .iter()
            .enumerate()
            .map(|(i, &((start, end), label, score))| Detection { video: format!("v{}", i % 3), start, end, label, score })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_detections(&path, &dets).unwrap();
        prop_assert_eq!(load_detections(&path, Some(5)).unwrap(), dets);
    }
}

#[test]
fn ramp_breaks_idempotence() {
    let mut col = [0.05f32; 30];
    for (t, v) in col.iter_mut().enumerate().take(20).skip(10) {
        *v = 0.1 * (t - 9) as f32;
    }
    let data = col.iter().flat_map(|&p| [p, 1.0 - p]).collect();
    let scores = ScoreMatrix::new(30, 2, data).unwrap();
    let params = RefineParams::for_video(30, 0.0);
    let seg = |s, e| ProposalSegment {
        video: "v".into(),
        start: s,
        end: e,
        score: None,
    };
    let a = refine_boundaries(&seg(11, 20), &scores, &params)
        .unwrap()
        .unwrap();
    let b = refine_boundaries(&seg(a.start, a.end), &scores, &params)
        .unwrap()
        .unwrap();
    assert!(b.start > a.start);
}

#[test]
fn nms_ties_resolve_by_start_then_class() {
    let d = |start, end, label| Detection {
        video: "v".into(),
        start,
        end,
        label,
        score: 0.5,
    };
    let kept = nms(&[d(5, 15, 0), d(4, 14, 0), d(4, 14, 1)], 0.4);
    let order: Vec<(usize, usize)> = kept.iter().map(|x| (x.start, x.label)).collect();
    assert_eq!(order, vec![(4, 0), (4, 1)]);
}
