use medisee_core::decoders::MaskLogits;
use medisee_core::decoders::{bbox_decode, DecoderConfig, DecoderParams};
use medisee_core::fusion::{fuse, route, FusionConfig, FusionMode, RouterParams};
use medisee_core::geometry::{BBox, Mask};
use medisee_core::losses::{bbox_loss, mask_loss, sim_loss, LossWeights};
use medisee_core::metrics::{aggregate_seg, box_iou, mask2box, mask_iou_dice, EvalSample};
use medisee_core::mllm::CandidateBundle;
use medisee_core::Tensor;
use proptest::prelude::*;

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |bits| Mask::new(h, w, bits).unwrap())
}

fn box_strategy() -> impl Strategy<Value = BBox> {
    (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64)
        .prop_map(|(a, b, c, d)| BBox::new(a.min(b), c.min(d), a.max(b), c.max(d)).unwrap())
}

fn bundle(n: usize, d: usize, data: Vec<f64>) -> CandidateBundle {
    CandidateBundle {
        candidates: Tensor::matrix(n, d, data).unwrap(),
        h_img: None,
        h_txt: Tensor::zeros(&[1, d]),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn router_weights_are_simplex_and_fusion_is_convex(
        n in 1usize..5,
        seed in any::<u64>(),
        data in prop::collection::vec(-3.0..3.0f64, 4 * 6),
    ) {
        let d = 6;
        let cfg = FusionConfig { n, mode: FusionMode::Soft, router_hidden: 7 };
        let p = RouterParams::init(cfg.clone(), d, seed).unwrap();
        let b = bundle(n, d, data[..n * d].to_vec());
        let (ws, wd) = route(&b, &p, &cfg).unwrap();
        for w in [&ws, &wd] {
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|&v| v >= 0.0));
        }
        let f = fuse(&b, &ws, &wd).unwrap();
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| b.candidates.row(i)[j]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(f.h_seg[j] >= lo - 1e-12 && f.h_seg[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn decoded_boxes_are_always_valid(seed in any::<u64>(), h in prop::collection::vec(-50.0..50.0f64, 8)) {
        let p = DecoderParams::init(DecoderConfig::default(), 8, seed).unwrap();
        let b = bbox_decode(&h, &p).unwrap();
        prop_assert!(0.0 <= b.x1 && b.x1 <= b.x2 && b.x2 <= 1.0);
        prop_assert!(0.0 <= b.y1 && b.y1 <= b.y2 && b.y2 <= 1.0);
    }

    #[test]
    fn iou_and_dice_agree(a in mask_strategy(6, 7), b in mask_strategy(6, 7)) {
        let (iou, dice) = mask_iou_dice(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&iou) && (0.0..=1.0).contains(&dice));
        prop_assert!((dice - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
        prop_assert_eq!(mask_iou_dice(&b, &a).unwrap(), (iou, dice));
    }

    #[test]
    fn mask2box_covers_mask(m in mask_strategy(9, 5)) {
        prop_assume!(!m.is_empty());
        let b = mask2box(&m).unwrap();
        for r in 0..9 {
            for c in 0..5 {
                if m.get(r, c) {
                    prop_assert!(c as f64 / 5.0 >= b.x1 && (c + 1) as f64 / 5.0 <= b.x2);
                    prop_assert!(r as f64 / 9.0 >= b.y1 && (r + 1) as f64 / 9.0 <= b.y2);
                }
            }
        }
    }

    #[test]
    fn box_iou_is_symmetric_and_bounded(a in box_strategy(), b in box_strategy()) {
        let v = box_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, box_iou(&b, &a));
    }

    #[test]
    fn aggregates_ignore_order(masks in prop::collection::vec((mask_strategy(4, 4), mask_strategy(4, 4)), 2..12), rot in 0usize..12) {
        let samples: Vec<EvalSample> = masks.into_iter().map(|(p, g)| EvalSample {
            pred_mask: p,
            gt_mask: g,
            pred_box: None,
            gt_box: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            category: "x".into(),
            length: None,
        }).collect();
        let mut rotated = samples.clone();
        rotated.rotate_left(rot % samples.len());
        rotated.reverse();
        prop_assert_eq!(aggregate_seg(&samples).unwrap(), aggregate_seg(&rotated).unwrap());
    }

    #[test]
    fn perfect_predictions_have_near_zero_loss(m in mask_strategy(8, 8), b in box_strategy()) {
        prop_assume!(!m.is_empty());
        let logits = Tensor::matrix(8, 8, m.bits().iter().map(|&v| if v { 40.0 } else { -40.0 }).collect()).unwrap();
        let w = LossWeights::default();
        let ml = mask_loss(&MaskLogits::new(logits), &m, &w).unwrap();
        prop_assert!(ml.dice <= 1e-6 && ml.bce <= 1e-6);
        prop_assume!(b.area() > 1e-6);
        let bl = bbox_loss(&b, &b, &w).unwrap();
        prop_assert!(bl.giou <= 1e-6 && bl.l1 == 0.0);
    }

    #[test]
    fn js_is_symmetric_and_bounded(p in prop::collection::vec(-20.0..20.0f64, 10), q in prop::collection::vec(-20.0..20.0f64, 10)) {
        let w = LossWeights::default();
        let a = sim_loss(&p, &q, &w).unwrap();
        let b = sim_loss(&q, &p, &w).unwrap();
        prop_assert!((a.js - b.js).abs() <= 1e-12);
        prop_assert!(a.js >= -1e-15 && a.js <= std::f64::consts::LN_2 + 1e-12);
        prop_assert_eq!(sim_loss(&p, &p, &w).unwrap().js, 0.0);
    }
}
