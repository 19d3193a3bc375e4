//! Patch and word embeddings: the visual and textual token streams.

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Linear};
use crate::rng::Rng;
use crate::sample::Image;
use crate::tensor::Matrix;

/// The token streams flowing through the encoder.
///
/// `visual` is `(n+1) × d` with row 0 the class (later subject) slot,
/// `textual` is `(m+1) × d` with row 0 the text class token, and latent
/// expression `i` is `(k_i+2) × d`: class row, subject row, then attributes.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    pub visual: Var,
    pub textual: Var,
    pub latents: Vec<Var>,
}

/// Row 0 of each latent expression.
pub const LATENT_CLS_ROW: usize = 0;
/// Row 1 of each latent expression.
pub const LATENT_SUBJECT_ROW: usize = 1;
/// First attribute row of each latent expression.
pub const LATENT_ATTR_START: usize = 2;

/// Concrete values of an [`EmbeddingSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingValues {
    pub visual: Matrix,
    pub textual: Matrix,
    pub latents: Vec<Matrix>,
}

impl EmbeddingSet {
    pub fn values(&self, g: &Graph) -> EmbeddingValues {
        EmbeddingValues {
            visual: g.value(self.visual).clone(),
            textual: g.value(self.textual).clone(),
            latents: self.latents.iter().map(|&z| g.value(z).clone()).collect(),
        }
    }

    /// Streams in concatenation order `[V, T, Z¹, …, Zᴺ]`.
    pub fn streams(&self) -> Vec<Var> {
        let mut s = vec![self.visual, self.textual];
        s.extend(&self.latents);
        s
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EmbedParams {
    pub patch_proj: Linear,
    pub visual_cls: ParamId,
    pub visual_pos: ParamId,
    pub token_table: ParamId,
    pub text_cls: ParamId,
    pub text_pos: ParamId,
}

impl EmbedParams {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d;
        Self {
            patch_proj: Linear::new(store, "embed.patch", cfg.patch * cfg.patch * 3, d, rng),
            visual_cls: nn::embedding(store, "embed.visual_cls", 1, d, rng),
            visual_pos: nn::embedding(store, "embed.visual_pos", cfg.num_patches(), d, rng),
            token_table: nn::embedding(store, "embed.tokens", cfg.vocab_size, d, rng),
            text_cls: nn::embedding(store, "embed.text_cls", 1, d, rng),
            text_pos: nn::embedding(store, "embed.text_pos", cfg.m_max, d, rng),
        }
    }
}

/// Cuts an image into non-overlapping `p × p` patches in raster order,
/// each flattened as `(dy, dx, channel)`.
pub fn patchify(image: &Image, patch: usize) -> Result<Matrix> {
    let (h, w) = (image.height(), image.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{h}x{w} image is not divisible into {patch}-pixel patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Matrix::zeros(gh * gw, patch * patch * 3);
    for pr in 0..gh {
        for pc in 0..gw {
            let row = out.row_mut(pr * gw + pc);
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..3 {
                        row[k] = image.get(pr * patch + dy, pc * patch + dx, ch);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Builds the visual stream (projected patches plus positions, behind a
/// learned class row) and the textual stream (looked-up words plus
/// positions, behind a learned class row). No latents yet.
pub fn embed_inputs(
    g: &mut Graph,
    params: &EmbedParams,
    image: &Image,
    token_ids: &[usize],
    cfg: &ModelConfig,
) -> Result<EmbeddingSet> {
    if (image.height(), image.width()) != (cfg.image_h, cfg.image_w) {
        return Err(Error::ShapeMismatch(format!(
            "image is {}x{}, model expects {}x{}",
            image.height(),
            image.width(),
            cfg.image_h,
            cfg.image_w
        )));
    }
    if token_ids.len() > cfg.m_max {
        return Err(Error::TextTooLong {
            len: token_ids.len(),
            max: cfg.m_max,
        });
    }
    if let Some(&bad) = token_ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::VocabOverflow {
            token: bad,
            vocab_size: cfg.vocab_size,
        });
    }

    let patches = g.constant(patchify(image, cfg.patch)?);
    let projected = params.patch_proj.forward(g, patches);
    let vpos = g.param(params.visual_pos);
    let projected = g.add(projected, vpos);
    let vcls = g.param(params.visual_cls);
    let visual = g.concat_rows(&[vcls, projected]);

    let tcls = g.param(params.text_cls);
    let textual = if token_ids.is_empty() {
        g.concat_rows(&[tcls])
    } else {
        let table = g.param(params.token_table);
        let words = g.gather_rows(table, token_ids);
        let tpos = g.param(params.text_pos);
        let tpos = g.slice_rows(tpos, 0, token_ids.len());
        let words = g.add(words, tpos);
        g.concat_rows(&[tcls, words])
    };
    Ok(EmbeddingSet {
        visual,
        textual,
        latents: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_all;

    fn setup(cfg: &ModelConfig) -> (ParamStore, EmbedParams) {
        let mut store = ParamStore::new();
        let mut rngs = seed_all(5);
        let p = EmbedParams::new(&mut store, cfg, &mut rngs.init);
        (store, p)
    }

    fn image(cfg: &ModelConfig, seed: u8) -> Image {
        let bytes = (0..cfg.image_h * cfg.image_w * 3)
            .map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed))
            .collect();
        Image::from_bytes(cfg.image_h, cfg.image_w, bytes).unwrap()
    }

    #[test]
    fn stream_shapes() {
        let cfg = ModelConfig::default();
        let (store, p) = setup(&cfg);
        let mut g = Graph::new(&store);
        let e = embed_inputs(&mut g, &p, &image(&cfg, 0), &[1, 2, 3], &cfg).unwrap();
        assert_eq!(g.shape(e.visual), (65, cfg.d));
        assert_eq!(g.shape(e.textual), (4, cfg.d));
        assert!(e.latents.is_empty());

        let e = embed_inputs(&mut g, &p, &image(&cfg, 0), &[], &cfg).unwrap();
        assert_eq!(g.shape(e.textual), (1, cfg.d));
    }

    #[test]
    fn full_resolution_patch_count() {
        let cfg = ModelConfig {
            image_h: 480,
            image_w: 480,
            patch: 16,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.num_patches(), 900);
        let img = Image::new(480, 480);
        assert_eq!(patchify(&img, 16).unwrap().rows(), 900);
    }

    #[test]
    fn errors() {
        let cfg = ModelConfig::default();
        let (store, p) = setup(&cfg);
        let mut g = Graph::new(&store);
        let img = image(&cfg, 0);
        assert!(matches!(
            embed_inputs(&mut g, &p, &img, &[64], &cfg),
            Err(Error::VocabOverflow { token: 64, .. })
        ));
        assert!(matches!(
            embed_inputs(&mut g, &p, &img, &[1; 13], &cfg),
            Err(Error::TextTooLong { .. })
        ));
        assert!(matches!(patchify(&Image::new(60, 64), 8), Err(Error::ShapeMismatch(_))));
        assert!(embed_inputs(&mut g, &p, &Image::new(32, 32), &[], &cfg).is_err());
    }

    #[test]
    fn positions_depend_only_on_index() {
        // Swapping two patches' pixels swaps only their projected content.
        let cfg = ModelConfig::default();
        let (store, p) = setup(&cfg);
        let a = image(&cfg, 3);
        let mut bytes = a.bytes().to_vec();
        for dy in 0..8 {
            for dx in 0..8 {
                for ch in 0..3 {
                    bytes.swap((dy * 64 + dx) * 3 + ch, (dy * 64 + 8 + dx) * 3 + ch);
                }
            }
        }
        let b = Image::from_bytes(64, 64, bytes).unwrap();
        let mut g = Graph::inference(&store);
        let ea = embed_inputs(&mut g, &p, &a, &[], &cfg).unwrap().values(&g);
        let eb = embed_inputs(&mut g, &p, &b, &[], &cfg).unwrap().values(&g);
        let pos = store.get(p.visual_pos);
        // content(patch) = row - pos(index)
        let content = |m: &Matrix, row: usize, idx: usize| -> Vec<f64> {
            m.row(row).iter().zip(pos.row(idx)).map(|(x, q)| x - q).collect()
        };
        let ca0 = content(&ea.visual, 1, 0);
        let cb1 = content(&eb.visual, 2, 1);
        for (x, y) in ca0.iter().zip(&cb1) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(ea.visual.row(3), eb.visual.row(3));
    }

    #[test]
    fn deterministic() {
        let cfg = ModelConfig::default();
        let (store, p) = setup(&cfg);
        let img = image(&cfg, 7);
        let mut g = Graph::inference(&store);
        let a = embed_inputs(&mut g, &p, &img, &[4, 5], &cfg).unwrap().values(&g);
        let b = embed_inputs(&mut g, &p, &img, &[4, 5], &cfg).unwrap().values(&g);
        assert_eq!(a, b);
    }
}
