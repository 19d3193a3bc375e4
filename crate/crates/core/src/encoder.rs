//! Shared self-attention encoder with per-stream experts and the subject
//! distributor.
//!
//! Every layer concatenates `[V, T, Z¹, …, Zᴺ]`, attends jointly, splits the
//! result back, and sends each stream through its own expert: a two-layer
//! MLP for visual and textual tokens, a single linear map per latent
//! expression. The subject distributor then copies the visual subject token
//! into every latent subject slot, and the concept injector refines the
//! attribute tokens (see [`crate::concept`]).

use crate::autograd::{Graph, ParamStore, Var};
use crate::concept::{self, ConceptBank};
use crate::config::ModelConfig;
use crate::embed::{EmbeddingSet, LATENT_SUBJECT_ROW};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, Norm};
use crate::rng::Rng;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    /// Fused query/key/value projection, `d → 3d`.
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub attn_norm: Norm,
    pub attention: AttentionParams,
    pub norm_visual: Norm,
    pub norm_textual: Norm,
    /// Absent when the model has no latent expressions.
    pub norm_latent: Option<Norm>,
    pub ffn_visual: Mlp,
    pub ffn_textual: Mlp,
    /// One linear expert per latent expression.
    pub latent_experts: Vec<Linear>,
}

impl EncoderLayerParams {
    pub fn new(store: &mut ParamStore, layer: usize, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d;
        let p = |s: &str| format!("encoder.{layer}.{s}");
        Self {
            attn_norm: Norm::new(store, &p("attn_norm"), d),
            attention: AttentionParams {
                qkv: Linear::new(store, &p("attn.qkv"), d, 3 * d, rng),
                out: Linear::new(store, &p("attn.out"), d, d, rng),
                heads: cfg.heads,
            },
            norm_visual: Norm::new(store, &p("norm_visual"), d),
            norm_textual: Norm::new(store, &p("norm_textual"), d),
            norm_latent: cfg.has_latents().then(|| Norm::new(store, &p("norm_latent"), d)),
            ffn_visual: Mlp::new(store, &p("ffn_visual"), d, cfg.ffn_hidden, d, rng),
            ffn_textual: Mlp::new(store, &p("ffn_textual"), d, cfg.ffn_hidden, d, rng),
            latent_experts: (0..cfg.n_latent())
                .map(|i| Linear::new(store, &p(&format!("latent_expert.{i}")), d, d, rng))
                .collect(),
        }
    }
}

/// Row counts of each stream, in concatenation order.
fn stream_rows(g: &Graph, embeds: &EmbeddingSet) -> Vec<usize> {
    embeds.streams().iter().map(|&s| g.shape(s).0).collect()
}

fn split_streams(g: &mut Graph, joined: Var, rows: &[usize]) -> EmbeddingSet {
    let mut offset = 0;
    let mut parts = Vec::with_capacity(rows.len());
    for &r in rows {
        parts.push(g.slice_rows(joined, offset, r));
        offset += r;
    }
    let latents = parts.split_off(2);
    EmbeddingSet {
        visual: parts[0],
        textual: parts[1],
        latents,
    }
}

/// Result of [`shared_attention`]: per-stream outputs and the head-averaged
/// attention matrix over the concatenated tokens.
pub struct AttentionOutput {
    pub streams: EmbeddingSet,
    pub weights: Matrix,
}

/// Multi-head self-attention over the concatenation `[V, T, Z¹, …, Zᴺ]`.
///
/// `key_mask[j] == false` excludes token `j` as a key (padding). Returns the
/// attention output (after the output projection) split back per stream;
/// no residual or normalization is applied here.
pub fn shared_attention(
    g: &mut Graph,
    embeds: &EmbeddingSet,
    params: &AttentionParams,
    key_mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let rows = stream_rows(g, embeds);
    let streams = embeds.streams();
    let d = g.shape(embeds.visual).1;
    if streams.iter().any(|&s| g.shape(s).1 != d) {
        return Err(Error::ShapeMismatch("streams disagree on channel width".into()));
    }
    let total: usize = rows.iter().sum();
    if let Some(mask) = key_mask {
        if mask.len() != total || !mask.iter().any(|&k| k) {
            return Err(Error::ShapeMismatch(format!(
                "key mask of {} entries for {total} tokens",
                mask.len()
            )));
        }
    }
    let x = g.concat_rows(&streams);
    let qkv = params.qkv.forward(g, x);
    let heads = params.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let bias = key_mask.map(|mask| {
        let row: Vec<f64> = mask.iter().map(|&k| if k { 0.0 } else { -1e30 }).collect();
        Matrix::row_vector(&row)
    });
    let mut head_outputs = Vec::with_capacity(heads);
    let mut avg = Matrix::zeros(total, total);
    for h in 0..heads {
        let q = g.slice_cols(qkv, h * dh, dh);
        let k = g.slice_cols(qkv, d + h * dh, dh);
        let v = g.slice_cols(qkv, 2 * d + h * dh, dh);
        let scores = g.matmul_nt(q, k);
        let mut scores = g.scale(scores, scale);
        if let Some(b) = &bias {
            let b = g.constant(b.clone());
            scores = g.add_row(scores, b);
        }
        let weights = g.softmax_rows(scores);
        avg.add_assign(g.value(weights));
        head_outputs.push(g.matmul(weights, v));
    }
    avg.scale_assign(1.0 / heads as f64);
    let joined = if heads == 1 {
        head_outputs[0]
    } else {
        g.concat_cols(&head_outputs)
    };
    let out = params.out.forward(g, joined);
    Ok(AttentionOutput {
        streams: split_streams(g, out, &rows),
        weights: avg,
    })
}

fn residual(g: &mut Graph, a: &EmbeddingSet, b: &EmbeddingSet) -> EmbeddingSet {
    EmbeddingSet {
        visual: g.add(a.visual, b.visual),
        textual: g.add(a.textual, b.textual),
        latents: a
            .latents
            .iter()
            .zip(&b.latents)
            .map(|(&x, &y)| g.add(x, y))
            .collect(),
    }
}

/// Pre-norm attention block: `x + MSA(LN(x))` on every stream.
pub fn attention_block(
    g: &mut Graph,
    embeds: &EmbeddingSet,
    layer: &EncoderLayerParams,
    key_mask: Option<&[bool]>,
) -> Result<(EmbeddingSet, Matrix)> {
    let normed = EmbeddingSet {
        visual: layer.attn_norm.forward(g, embeds.visual),
        textual: layer.attn_norm.forward(g, embeds.textual),
        latents: embeds
            .latents
            .iter()
            .map(|&z| layer.attn_norm.forward(g, z))
            .collect(),
    };
    let attn = shared_attention(g, &normed, &layer.attention, key_mask)?;
    Ok((residual(g, embeds, &attn.streams), attn.weights))
}

/// Routes each stream through its own expert with a residual:
/// `V + MLP_v(LN(V))`, `T + MLP_t(LN(T))`, `Zⁱ + Linearⁱ(LN(Zⁱ))`.
pub fn apply_experts(g: &mut Graph, embeds: &EmbeddingSet, layer: &EncoderLayerParams) -> Result<EmbeddingSet> {
    if embeds.latents.len() != layer.latent_experts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} latent expressions for {} experts",
            embeds.latents.len(),
            layer.latent_experts.len()
        )));
    }
    let v = layer.norm_visual.forward(g, embeds.visual);
    let v = layer.ffn_visual.forward(g, v);
    let t = layer.norm_textual.forward(g, embeds.textual);
    let t = layer.ffn_textual.forward(g, t);
    let latents = embeds
        .latents
        .iter()
        .zip(&layer.latent_experts)
        .map(|(&z, expert)| {
            let n = layer.norm_latent.expect("latent norm").forward(g, z);
            expert.forward(g, n)
        })
        .collect();
    let update = EmbeddingSet {
        visual: v,
        textual: t,
        latents,
    };
    Ok(residual(g, embeds, &update))
}

/// Overwrites the subject slot (row 1) of every latent expression with the
/// visual subject token (visual row 0). A no-op when the distributor is
/// disabled, including GRES mode.
pub fn distribute_subject(g: &mut Graph, embeds: &EmbeddingSet, cfg: &ModelConfig) -> EmbeddingSet {
    if !cfg.distributes() {
        return embeds.clone();
    }
    EmbeddingSet {
        visual: embeds.visual,
        textual: embeds.textual,
        latents: embeds
            .latents
            .iter()
            .map(|&z| g.replace_row(z, LATENT_SUBJECT_ROW, embeds.visual, 0))
            .collect(),
    }
}

/// Per-layer diagnostics collected by [`encode`] when tracing.
#[derive(Clone, Debug, Default)]
pub struct EncodeTrace {
    /// Head-averaged attention over the concatenated tokens, one per layer.
    pub attention: Vec<Matrix>,
    /// Slot-normalized injection weights `W̃` (`N_a × N_c`), one per layer.
    pub concept_weights: Vec<Matrix>,
    /// Concept-to-patch weights `W` (`N_c × |selected|`), one per layer.
    pub patch_weights: Vec<Matrix>,
    /// Indices of the target-related patches chosen at each layer.
    pub selected_patches: Vec<Vec<usize>>,
}

/// One full layer: attention, experts, subject distribution, concept injection.
pub fn encoder_layer(
    g: &mut Graph,
    embeds: &EmbeddingSet,
    layer: &EncoderLayerParams,
    bank: Option<&ConceptBank>,
    layer_index: usize,
    cfg: &ModelConfig,
    trace: Option<&mut EncodeTrace>,
) -> Result<EmbeddingSet> {
    let (x, attn) = attention_block(g, embeds, layer, None)?;
    let x = apply_experts(g, &x, layer)?;
    let x = distribute_subject(g, &x, cfg);
    let (x, injection) = match bank {
        Some(bank) if cfg.injects() => {
            let concepts = g.param(bank.for_layer(layer_index));
            let (x, inj) = concept::inject_layer(g, &x, concepts, cfg.inject_mode)?;
            (x, Some(inj))
        }
        _ => (x, None),
    };
    if let Some(t) = trace {
        t.attention.push(attn);
        if let Some(inj) = injection {
            t.concept_weights.push(inj.slot_weights);
            t.patch_weights.push(inj.patch_weights);
            t.selected_patches.push(inj.selected);
        }
    }
    Ok(x)
}

/// Runs all layers. The row count of every stream is preserved.
pub fn encode(
    g: &mut Graph,
    embeds: EmbeddingSet,
    layers: &[EncoderLayerParams],
    bank: Option<&ConceptBank>,
    cfg: &ModelConfig,
    mut trace: Option<&mut EncodeTrace>,
) -> Result<EmbeddingSet> {
    let mut x = embeds;
    for (l, layer) in layers.iter().enumerate() {
        x = encoder_layer(g, &x, layer, bank, l, cfg, trace.as_deref_mut())?;
    }
    Ok(x)
}
