use proptest::prelude::*;
use specseg::objectives::{
    binarize, boxes_from_masks, cbce, cfl, ciou, detection_metrics, extract_segments, match_segments, optimal_assignment,
    rbce, rfl, riou, BoxZ, IouMatrix, OccupancyMask, PredictedSpectrum, Segment,
};

fn segment(len: usize) -> impl Strategy<Value = Segment> {
    (0..len, 1..len).prop_map(move |(a, w)| Segment::new(a, (a + w - 1).min(len - 1)))
}

fn prob() -> impl Strategy<Value = f64> {
    0.001f64..0.999
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn riou_bounded_and_symmetric(a in segment(128), b in segment(128)) {
        let v = riou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, riou(&b, &a));
        prop_assert_eq!(riou(&a, &a), 1.0);
        prop_assert_eq!(v > 0.0, a.intersects(&b));
    }

    #[test]
    fn ciou_bounded_and_symmetric(ax in segment(64), ay in segment(64), bx in segment(64), by in segment(64)) {
        let (a, b) = (BoxZ { x: ax, y: ay }, BoxZ { x: bx, y: by });
        let v = ciou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, ciou(&b, &a));
        prop_assert_eq!(ciou(&a, &a), 1.0);
    }

    #[test]
    fn cfl_without_focusing_is_cbce(p in prop::collection::vec((prob(), prob(), any::<bool>()), 1..64)) {
        let pred = PredictedSpectrum { p_x: p.iter().map(|t| t.0).collect(), p_y: p.iter().map(|t| t.1).collect() };
        let target = OccupancyMask::from_occupancy(p.iter().map(|t| t.2).collect());
        let a = cfl(&pred, &target, 0.0, 1.0).unwrap();
        let b = cbce(&pred, &target).unwrap();
        prop_assert!((a.loss - b.loss).abs() <= 1e-12 * b.loss.abs().max(1.0));
        for (u, v) in a.d_px.iter().zip(&b.d_px).chain(a.d_py.iter().zip(&b.d_py)) {
            prop_assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }

    #[test]
    fn complex_losses_average_the_parts(p in prop::collection::vec((prob(), prob(), any::<bool>()), 1..64), g in 0.0f64..3.0, al in 0.1f64..4.0) {
        let px: Vec<f64> = p.iter().map(|t| t.0).collect();
        let py: Vec<f64> = p.iter().map(|t| t.1).collect();
        let o: Vec<bool> = p.iter().map(|t| t.2).collect();
        let pred = PredictedSpectrum { p_x: px.clone(), p_y: py.clone() };
        let target = OccupancyMask::from_occupancy(o.clone());
        let c = cfl(&pred, &target, g, al).unwrap().loss;
        let r = 0.5 * (rfl(&px, &o, g, al).unwrap().loss + rfl(&py, &o, g, al).unwrap().loss);
        prop_assert!((c - r).abs() <= 1e-12 * r.abs().max(1.0));
        let c = cbce(&pred, &target).unwrap().loss;
        let r = 0.5 * (rbce(&px, &o).unwrap().loss + rbce(&py, &o).unwrap().loss);
        prop_assert!((c - r).abs() <= 1e-12 * r.abs().max(1.0));
    }

    #[test]
    fn losses_are_non_negative(p in prop::collection::vec((prob(), any::<bool>()), 1..64), g in 0.0f64..3.0, al in 0.1f64..4.0) {
        let x: Vec<f64> = p.iter().map(|t| t.0).collect();
        let o: Vec<bool> = p.iter().map(|t| t.1).collect();
        prop_assert!(rfl(&x, &o, g, al).unwrap().loss >= 0.0);
        prop_assert!(rbce(&x, &o).unwrap().loss >= 0.0);
    }

    #[test]
    fn segments_round_trip_masks(mask in prop::collection::vec(any::<bool>(), 0..200)) {
        let segs = extract_segments(&mask);
        for w in segs.windows(2) {
            prop_assert!(w[0].end + 1 < w[1].begin);
        }
        let back = OccupancyMask::from_segments(mask.len(), &segs);
        prop_assert_eq!(back.o_x, mask);
    }

    #[test]
    fn higher_threshold_keeps_fewer_bins(p in prop::collection::vec((prob(), prob()), 1..128), t1 in 0.05f64..0.95, dt in 0.0f64..0.5) {
        let pred = PredictedSpectrum { p_x: p.iter().map(|t| t.0).collect(), p_y: p.iter().map(|t| t.1).collect() };
        let lo = binarize(&pred, t1).unwrap();
        let hi = binarize(&pred, (t1 + dt).min(0.99)).unwrap();
        for (a, b) in [(&lo.x, &hi.x), (&lo.y, &hi.y), (&lo.abs, &hi.abs)] {
            prop_assert!(a.iter().zip(b.iter()).all(|(&l, &h)| l || !h));
        }
    }

    #[test]
    fn boxes_cover_both_masks(mx in prop::collection::vec(any::<bool>(), 32), my in prop::collection::vec(any::<bool>(), 32)) {
        let boxes = boxes_from_masks(&mx, &my);
        for b in &boxes {
            prop_assert!(b.x.end < 32 && b.y.end < 32);
        }
        // no box is built when either mask is empty
        if mx.iter().all(|&v| !v) || my.iter().all(|&v| !v) {
            prop_assert!(boxes.is_empty());
        }
    }

    #[test]
    fn assignment_is_no_worse_than_greedy(r in 0usize..6, c in 0usize..6, vals in prop::collection::vec(0.0f64..1.0, 36)) {
        let m = IouMatrix::from_fn(r, c, |i, j| vals[i * 6 + j]);
        let a = optimal_assignment(&m);
        let mut used = vec![false; c];
        let mut greedy = 0.0;
        for i in 0..r {
            if let Some(j) = (0..c).filter(|&j| !used[j]).max_by(|&x, &y| m.get(i, x).total_cmp(&m.get(i, y))) {
                used[j] = true;
                greedy += m.get(i, j);
            }
        }
        prop_assert!(a.total >= greedy - 1e-12);
        prop_assert!(a.pairs.len() <= r.min(c));
    }

    #[test]
    fn metric_bounds(pred in prop::collection::vec(segment(64), 0..5), truth in prop::collection::vec(segment(64), 0..5)) {
        let m5 = detection_metrics(&[pred.clone()], &[truth.clone()], 0.5);
        let m9 = detection_metrics(&[pred.clone()], &[truth.clone()], 0.9);
        for v in [m5.accuracy, m5.recall, m5.mean_iou] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m5.accuracy <= m5.recall);
        prop_assert!(m9.recall <= m5.recall);
        let c = match_segments(&pred, &truth, 0.5);
        prop_assert_eq!(c.tp + c.fn_, truth.len());
        prop_assert_eq!(c.tp + c.fp, pred.len());
        let perfect = detection_metrics(&[truth.clone()], &[truth.clone()], 0.9);
        prop_assert_eq!(perfect.recall, 1.0);
    }
}
