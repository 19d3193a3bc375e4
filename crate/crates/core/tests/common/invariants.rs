//! Structural invariants on randomized models, and the margin cap of the
//! contrastive objective. Each check panics on the first violation.

use latent_vg::autograd::{Graph, ParamStore};
use latent_vg::concept::inject_layer;
use latent_vg::config::{InjectMode, ModelConfig};
use latent_vg::embed::{self, EmbeddingSet, LATENT_ATTR_START};
use latent_vg::encoder::{encoder_layer, EncodeTrace};
use latent_vg::latent;
use latent_vg::model::LatentVg;
use latent_vg::objectives::positive_margin_contrastive;
use latent_vg::predictor::{mask_from_probmap, predict};
use latent_vg::rng::{self, seed_all};
use latent_vg::sample::Image;
use latent_vg::tensor::Matrix;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 24;

fn random_config(seed: u64) -> ModelConfig {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let k1 = r.random_range(1..5);
    let k2 = r.random_range(1..7);
    ModelConfig {
        d: 8 * r.random_range(1..3),
        layers: r.random_range(1..4),
        k_list: vec![k1, k2],
        p_drop_list: vec![0.2, 0.15],
        n_concepts: r.random_range(4..20),
        inject_mode: if seed % 3 == 0 { InjectMode::Replace } else { InjectMode::Residual },
        per_layer_concepts: seed % 2 == 1,
        seed,
        ..ModelConfig::tiny()
    }
}

fn random_input(cfg: &ModelConfig, seed: u64) -> (Image, Vec<usize>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let (h, w) = (cfg.image_h, cfg.image_w);
    let image = Image::from_bytes(h, w, (0..h * w * 3).map(|_| r.random()).collect()).unwrap();
    let m = r.random_range(1..=cfg.m_max);
    let tokens = (0..m).map(|_| r.random_range(0..cfg.vocab_size)).collect();
    (image, tokens)
}

fn subject_shared(g: &Graph, e: &EmbeddingSet) -> bool {
    let visual_subject = g.value(e.visual).row(0);
    e.latents.iter().all(|&z| g.value(z).row(1) == visual_subject)
}

pub fn subject_is_shared_after_every_layer() {
    for seed in 0..SEEDS {
        let cfg = random_config(seed);
        let model = LatentVg::new(cfg.clone()).unwrap();
        let (image, tokens) = random_input(&cfg, seed);
        let p = &model.params;
        let mut g = Graph::new(&model.store);
        let mut noise = seed_all(seed);
        let e = embed::embed_inputs(&mut g, &p.embed, &image, &tokens, &cfg).unwrap();
        let (mut e, _) = latent::initialize(&mut g, p.latent.as_ref().unwrap(), e, &cfg, Some(&mut noise)).unwrap();
        assert!(subject_shared(&g, &e), "seed {seed}: after initialization");
        for (l, layer) in p.layers.iter().enumerate() {
            e = encoder_layer(&mut g, &e, layer, p.concepts.as_ref(), l, &cfg, None).unwrap();
            assert!(subject_shared(&g, &e), "seed {seed}: after layer {l}");
        }
    }
}

pub fn concept_weights_are_normalized() {
    for seed in 0..SEEDS {
        let cfg = random_config(seed);
        let model = LatentVg::new(cfg.clone()).unwrap();
        let (image, tokens) = random_input(&cfg, seed);
        let mut g = Graph::inference(&model.store);
        let mut trace = EncodeTrace::default();
        model.forward_sample(&mut g, &image, &tokens, None, Some(&mut trace)).unwrap();
        assert_eq!(trace.concept_weights.len(), cfg.layers);
        assert_eq!(trace.patch_weights.len(), cfg.layers);
        for w in &trace.concept_weights {
            for c in 0..w.cols() {
                let s: f64 = (0..w.rows()).map(|r| w.get(r, c)).sum();
                assert!((s - 1.0).abs() < 1e-6, "seed {seed}: slot column sums to {s}");
            }
        }
        for w in &trace.patch_weights {
            assert_eq!(w.rows(), cfg.n_concepts);
            for r in 0..w.rows() {
                let s: f64 = w.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "seed {seed}: concept row sums to {s}");
            }
        }
        for a in &trace.attention {
            for r in 0..a.rows() {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

pub fn injection_leaves_class_and_subject_rows() {
    let store = ParamStore::new();
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, 1);
        let d = 4 + (seed as usize % 5);
        let mut rand = |rows: usize| Matrix::from_fn(rows, d, |_, _| rng::normal(&mut r));
        let visual = rand(10);
        let textual = rand(4);
        let latents: Vec<Matrix> = (0..1 + seed as usize % 3).map(|i| rand(LATENT_ATTR_START + 1 + i)).collect();
        let concepts = rand(7);

        let mut g = Graph::inference(&store);
        let e = EmbeddingSet {
            visual: g.constant(visual),
            textual: g.constant(textual),
            latents: latents.iter().map(|z| g.constant(z.clone())).collect(),
        };
        let c = g.constant(concepts);
        let mode = if seed % 2 == 0 { InjectMode::Residual } else { InjectMode::Replace };
        let (out, _) = inject_layer(&mut g, &e, c, mode).unwrap();
        assert_eq!(g.value(out.visual), g.value(e.visual));
        assert_eq!(g.value(out.textual), g.value(e.textual));
        for (before, &after) in latents.iter().zip(&out.latents) {
            let after = g.value(after);
            assert_eq!(after.shape(), before.shape());
            for row in 0..LATENT_ATTR_START {
                assert_eq!(after.row(row), before.row(row), "seed {seed}: row {row} changed");
            }
        }
    }
}

pub fn inference_is_deterministic() {
    for seed in 0..SEEDS {
        let cfg = ModelConfig {
            gres_enabled: seed % 2 == 0,
            ..random_config(seed)
        };
        let model = LatentVg::new(cfg.clone()).unwrap();
        let (image, tokens) = random_input(&cfg, seed);
        let a = predict(&model, &image, &tokens).unwrap();
        let b = predict(&model, &image, &tokens).unwrap();
        assert_eq!(a.prob_map, b.prob_map);
        assert_eq!(a.per_expression_maps, b.per_expression_maps);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.bbox, b.bbox);
        assert_eq!(a.empty_logit, b.empty_logit);
    }
}

pub fn mask_shrinks_as_threshold_rises() {
    for seed in 0..SEEDS {
        let cfg = random_config(seed);
        let model = LatentVg::new(cfg.clone()).unwrap();
        let (image, tokens) = random_input(&cfg, seed);
        let prob = predict(&model, &image, &tokens).unwrap().prob_map;
        let thresholds = [0.05, 0.2, 0.35, 0.5, 0.65, 0.8, 0.95];
        let masks: Vec<_> = thresholds
            .iter()
            .map(|&t| mask_from_probmap(&prob, t, cfg.image_h, cfg.image_w))
            .collect();
        for pair in masks.windows(2) {
            assert!(pair[0].area() >= pair[1].area());
            assert!(pair[1].data().iter().zip(pair[0].data()).all(|(&hi, &lo)| !hi || lo));
        }
    }
}

fn contrastive_at(s: f64, gamma: f64) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let pos = g.constant(Matrix::row_vector(&[s]));
    let neg = g.constant(Matrix::row_vector(&[0.3, -0.1, 0.05]));
    let loss = positive_margin_contrastive(&mut g, pos, &[neg], gamma, 0.07).unwrap();
    g.value(loss).item()
}

pub fn margin_caps_positive_gradient() {
    let h = 1e-6;
    let fd = |s: f64| (contrastive_at(s + h, 0.2) - contrastive_at(s - h, 0.2)) / (2.0 * h);
    for s in [0.85, 0.9, 0.99] {
        let d = fd(s);
        assert!(d.abs() <= 1e-8, "s = {s}: derivative {d:e}");
    }
    let d = fd(0.5);
    assert!((d + 1.0 / 0.07).abs() < 1e-4, "s = 0.5: derivative {d}");
}
