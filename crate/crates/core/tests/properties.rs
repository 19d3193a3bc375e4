use latent_vg::autograd::{Graph, ParamStore};
use latent_vg::concept::select_indices;
use latent_vg::config::DropoutMode;
use latent_vg::latent::{length_transform, semantic_dropout};
use latent_vg::metrics::{aggregate, iou, EvalPair};
use latent_vg::predictor::box_from_mask;
use latent_vg::rng;
use latent_vg::sample::Mask;
use latent_vg::tensor::Matrix;
use proptest::prelude::*;

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    proptest::collection::vec(any::<bool>(), h * w).prop_map(move |v| Mask::from_vec(h, w, v).unwrap())
}

fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..10, 1usize..10).prop_flat_map(|(h, w)| (mask_strategy(h, w), mask_strategy(h, w)))
}

proptest! {
    #[test]
    fn iou_is_bounded_and_symmetric((a, b) in mask_pair()) {
        let ab = iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn rle_round_trips((a, _) in mask_pair()) {
        let back = Mask::from_rle(a.height(), a.width(), &a.to_rle()).unwrap();
        prop_assert_eq!(back, a);
    }

    #[test]
    fn box_is_tight((a, _) in mask_pair()) {
        match box_from_mask(&a) {
            None => prop_assert!(a.is_empty()),
            Some(b) => {
                let raster = b.rasterize(a.height(), a.width());
                for r in 0..a.height() {
                    for c in 0..a.width() {
                        prop_assert!(!a.get(r, c) || raster.get(r, c));
                    }
                }
                prop_assert!((b.x_min..=b.x_max).any(|c| a.get(b.y_min, c)));
                prop_assert!((b.x_min..=b.x_max).any(|c| a.get(b.y_max, c)));
                prop_assert!((b.y_min..=b.y_max).any(|r| a.get(r, b.x_min)));
                prop_assert!((b.y_min..=b.y_max).any(|r| a.get(r, b.x_max)));
            }
        }
    }

    #[test]
    fn precision_fractions_are_ordered(pairs in proptest::collection::vec(mask_pair(), 1..8)) {
        let eval: Vec<EvalPair> = pairs
            .iter()
            .map(|(p, g)| EvalPair {
                pred_mask: p,
                gt_mask: g,
                pred_box: None,
                gt_box: None,
                no_target: false,
                empty_decision: None,
            })
            .collect();
        let r = aggregate(&eval, false).unwrap();
        prop_assert!(r.prec_at[0] >= r.prec_at[1] && r.prec_at[1] >= r.prec_at[2]);
        prop_assert!((0.0..=1.0).contains(&r.miou) && (0.0..=1.0).contains(&r.oiou));
    }

    #[test]
    fn selection_keeps_the_best_patch(scores in proptest::collection::vec(-5.0f64..5.0, 1..40)) {
        let picked = select_indices(&scores);
        prop_assert!(!picked.is_empty());
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(picked.iter().any(|&i| scores[i] == best));
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        prop_assert!(picked.iter().all(|&i| scores[i] >= mean.min(best)));
    }

    #[test]
    fn dropout_zeroes_whole_rows(m in 1usize..10, d in 1usize..8, p in 0.0f64..0.95, seed in any::<u64>()) {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let x = Matrix::from_fn(m, d, |r, c| 1.0 + (r * d + c) as f64);
        let xv = g.constant(x.clone());
        let mut r = rng::stream(seed, 0);
        let out = semantic_dropout(&mut g, xv, p, DropoutMode::Row, Some(&mut r));
        let out = g.value(out);
        for row in 0..m {
            let kept = out.row(row) == x.row(row);
            let zeroed = out.row(row).iter().all(|&v| v == 0.0);
            prop_assert!(kept || zeroed);
        }
    }

    #[test]
    fn length_transform_emits_k_rows(m in 1usize..8, extra in 0usize..4, k in 1usize..8, d in 1usize..6) {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let x = g.constant(Matrix::filled(m, d, 0.5));
        let phi = g.constant(Matrix::filled(k, m + extra, 1.0));
        let out = length_transform(&mut g, x, phi).unwrap();
        prop_assert_eq!(g.shape(out), (k, d));
        prop_assert!(g.value(out).data().iter().all(|&v| (v - 0.5 * m as f64).abs() < 1e-12));
    }
}
