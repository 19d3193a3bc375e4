//! Visual concept injection: pool text-relevant patches into concept tokens
//! and let attribute tokens compete for them.

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::config::{InjectMode, ModelConfig};
use crate::embed::{EmbeddingSet, LATENT_ATTR_START};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Matrix;

/// Learned concept tokens, one `N_c × d` matrix shared by all layers or one
/// per layer.
#[derive(Clone, Debug)]
pub struct ConceptBank {
    pub banks: Vec<ParamId>,
}

impl ConceptBank {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let count = if cfg.per_layer_concepts { cfg.layers.max(1) } else { 1 };
        let banks = (0..count)
            .map(|l| {
                let name = if cfg.per_layer_concepts {
                    format!("concepts.{l}")
                } else {
                    "concepts".to_string()
                };
                store.add(name, orthogonal_rows(cfg.n_concepts, cfg.d, rng))
            })
            .collect();
        Self { banks }
    }

    pub fn for_layer(&self, layer: usize) -> ParamId {
        self.banks[layer.min(self.banks.len() - 1)]
    }
}

/// `rows × d` matrix with orthonormal rows when `rows ≤ d`. Larger banks
/// stack independent orthonormal blocks, so rows are orthogonal within a
/// block and only randomly aligned across blocks.
pub fn orthogonal_rows(rows: usize, d: usize, rng: &mut Rng) -> Matrix {
    let mut out = Matrix::zeros(rows, d);
    let mut block_start = 0;
    while block_start < rows {
        let n = (rows - block_start).min(d);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
        while basis.len() < n {
            let mut v: Vec<f64> = (0..d).map(|_| rng::normal(rng)).collect();
            // two passes of Gram-Schmidt keep round-off well below 1e-12
            for _ in 0..2 {
                for b in &basis {
                    let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
        }
        for (i, b) in basis.iter().enumerate() {
            out.row_mut(block_start + i).copy_from_slice(b);
        }
        block_start += n;
    }
    out
}

/// Indices of the patches whose score reaches the mean score. The cutoff is
/// capped at the maximum so at least one patch is always kept, even when
/// rounding pushes the mean of equal scores above them.
pub fn select_indices(scores: &[f64]) -> Vec<usize> {
    if scores.is_empty() {
        return Vec::new();
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cutoff = mean.min(max);
    (0..scores.len()).filter(|&i| scores[i] >= cutoff).collect()
}

/// Selects the target-related rows of `patches` (`n × d`) by their dot
/// product with the text class token (`1 × d`).
pub fn select_target_patches(g: &mut Graph, patches: Var, text_cls: Var) -> Result<(Var, Vec<usize>)> {
    let (n, d) = g.shape(patches);
    if n == 0 {
        return Err(Error::ShapeMismatch("no patches to select from".into()));
    }
    if g.shape(text_cls) != (1, d) {
        return Err(Error::ShapeMismatch(format!(
            "text class token {:?} against {d}-wide patches",
            g.shape(text_cls)
        )));
    }
    let scores = g.value(patches).matmul_t(g.value(text_cls), true);
    let selected = select_indices(scores.data());
    let rows = g.gather_rows(patches, &selected);
    Ok((rows, selected))
}

/// `W = softmax_rows(C · V_trᵀ)`: how much each concept draws from each
/// selected patch.
pub fn concept_patch_weights(g: &mut Graph, concepts: Var, target_patches: Var) -> Result<Var> {
    let (nc, d) = g.shape(concepts);
    let (ntr, dp) = g.shape(target_patches);
    if d != dp || ntr == 0 || nc == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{nc}x{d} concepts against {ntr}x{dp} patches"
        )));
    }
    let logits = g.matmul_nt(concepts, target_patches);
    Ok(g.softmax_rows(logits))
}

/// `C^V = W · V_tr`: each concept becomes a convex combination of the
/// selected patches.
pub fn retrieve_visual_concepts(g: &mut Graph, concepts: Var, target_patches: Var) -> Result<Var> {
    let weights = concept_patch_weights(g, concepts, target_patches)?;
    Ok(g.matmul(weights, target_patches))
}

/// Result of [`inject_concepts`].
pub struct Injection {
    /// Updated attribute blocks, one per expression.
    pub attributes: Vec<Var>,
    /// Column-normalized weights `W̃` (`N_a × N_c`).
    pub slot_weights: Matrix,
}

/// Attribute tokens of all expressions compete for the visual concepts:
/// `W̃ = softmax_cols(Ã · C^Vᵀ)`, `Ǎ = W̃ · C^V`, split back per expression
/// and combined with the incoming attributes according to `mode`.
pub fn inject_concepts(
    g: &mut Graph,
    attributes: &[Var],
    visual_concepts: Var,
    mode: InjectMode,
) -> Result<Injection> {
    let d = g.shape(visual_concepts).1;
    let counts: Vec<usize> = attributes.iter().map(|&a| g.shape(a).0).collect();
    if counts.iter().sum::<usize>() == 0 {
        return Err(Error::ShapeMismatch("no attribute tokens to inject into".into()));
    }
    if attributes.iter().any(|&a| g.shape(a).1 != d) {
        return Err(Error::ShapeMismatch("attribute width differs from concepts".into()));
    }
    let present: Vec<Var> = attributes
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(&a, _)| a)
        .collect();
    let stacked = g.concat_rows(&present);
    let logits = g.matmul_nt(stacked, visual_concepts);
    let weights = g.softmax_cols(logits);
    let slot_weights = g.value(weights).clone();
    let increments = g.matmul(weights, visual_concepts);

    let mut offset = 0;
    let mut out = Vec::with_capacity(attributes.len());
    for (&a, &count) in attributes.iter().zip(&counts) {
        if count == 0 {
            out.push(a);
            continue;
        }
        let inc = g.slice_rows(increments, offset, count);
        offset += count;
        out.push(match mode {
            InjectMode::Residual => g.add(a, inc),
            InjectMode::Replace => inc,
        });
    }
    Ok(Injection {
        attributes: out,
        slot_weights,
    })
}

/// Diagnostics of one injection step.
pub struct LayerInjection {
    pub selected: Vec<usize>,
    /// Row-normalized concept-to-patch weights `W` (`N_c × |selected|`).
    pub patch_weights: Matrix,
    pub slot_weights: Matrix,
}

/// Full injection step on the encoder streams: select patches against the
/// text class token, retrieve visual concepts, and refine the attribute rows
/// of every latent expression. Class and subject rows are left untouched.
pub fn inject_layer(
    g: &mut Graph,
    embeds: &EmbeddingSet,
    concepts: Var,
    mode: InjectMode,
) -> Result<(EmbeddingSet, LayerInjection)> {
    let n = g.shape(embeds.visual).0 - 1;
    let patches = g.slice_rows(embeds.visual, 1, n);
    let text_cls = g.row(embeds.textual, 0);
    let (target, selected) = select_target_patches(g, patches, text_cls)?;
    let patch_weights = concept_patch_weights(g, concepts, target)?;
    let visual_concepts = g.matmul(patch_weights, target);
    let patch_weights = g.value(patch_weights).clone();

    let heads: Vec<Var> = embeds
        .latents
        .iter()
        .map(|&z| g.slice_rows(z, 0, LATENT_ATTR_START))
        .collect();
    let attrs: Vec<Var> = embeds
        .latents
        .iter()
        .map(|&z| {
            let rows = g.shape(z).0 - LATENT_ATTR_START;
            g.slice_rows(z, LATENT_ATTR_START, rows)
        })
        .collect();
    let injection = inject_concepts(g, &attrs, visual_concepts, mode)?;
    let latents = heads
        .iter()
        .zip(&injection.attributes)
        .map(|(&h, &a)| g.concat_rows(&[h, a]))
        .collect();
    Ok((
        EmbeddingSet {
            visual: embeds.visual,
            textual: embeds.textual,
            latents,
        },
        LayerInjection {
            selected,
            patch_weights,
            slot_weights: injection.slot_weights,
        },
    ))
}
