//! Training objectives and the heads that feed them: projection heads,
//! the upsampling decoder, the fused probability map, the positive-margin
//! contrastive loss, the segmentation loss and the no-target classifier.

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::config::ModelConfig;
use crate::embed::EmbeddingSet;
use crate::error::{Error, Result};
use crate::nn::{self, Linear, Mlp, Norm};
use crate::rng::Rng;
use crate::sample::Mask;
use crate::tensor::Matrix;

/// Maps the final text class token and each latent class token into the
/// comparison space.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionHeads {
    pub text_norm: Norm,
    pub text_head: Mlp,
    /// Absent when the model has no latent expressions.
    pub latent: Option<(Norm, Mlp)>,
}

impl ProjectionHeads {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d;
        Self {
            text_norm: Norm::new(store, "heads.text_norm", d),
            text_head: Mlp::new(store, "heads.text", d, d, d, rng),
            latent: cfg.has_latents().then(|| {
                (
                    Norm::new(store, "heads.latent_norm", d),
                    Mlp::new(store, "heads.latent", d, d, d, rng),
                )
            }),
        }
    }

    /// `t_o` from a `1 × d` text class token.
    pub fn project_text(&self, g: &mut Graph, cls: Var) -> Var {
        let x = self.text_norm.forward(g, cls);
        self.text_head.forward(g, x)
    }

    /// `zⁱ_o` from a `1 × d` latent class token.
    pub fn project_latent(&self, g: &mut Graph, cls: Var) -> Result<Var> {
        let (norm, head) = self.latent.ok_or(Error::DisabledFeature("latent expressions"))?;
        let x = norm.forward(g, cls);
        Ok(head.forward(g, x))
    }
}

/// One decoder stage: a ×2 transposed convolution with kernel 2 and stride 2
/// (`d → 4d` per cell, then a pixel shuffle), or a pointwise one when the
/// grid is already at quarter resolution.
#[derive(Clone, Copy, Debug)]
pub struct UpStage {
    pub linear: Linear,
    pub doubles: bool,
}

/// Two-stage decoder from the patch grid to the `H/4 × W/4` feature map.
#[derive(Clone, Debug)]
pub struct Upsampler {
    pub stages: Vec<UpStage>,
}

/// Number of ×2 stages needed to go from patch resolution to a quarter of
/// the image.
pub fn doubling_stages(patch: usize) -> Result<usize> {
    match patch {
        4 => Ok(0),
        8 => Ok(1),
        16 => Ok(2),
        p => Err(Error::ShapeMismatch(format!(
            "patch size {p} cannot reach a quarter-resolution map in two x2 stages"
        ))),
    }
}

impl Upsampler {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let doubling = doubling_stages(cfg.patch)?;
        let d = cfg.d;
        let stages = (0..2)
            .map(|s| {
                let doubles = s < doubling;
                let width = if doubles { 4 * d } else { d };
                UpStage {
                    linear: Linear::new(store, &format!("decoder.{s}"), d, width, rng),
                    doubles,
                }
            })
            .collect();
        Ok(Self { stages })
    }
}

/// Row indices that turn a `(h·w) × 4d` stage output (sub-cell `q = 2·dy + dx`
/// in column block `q`) into a raster-ordered `(2h·2w) × d` grid.
fn pixel_shuffle_indices(h: usize, w: usize, d: usize) -> Vec<usize> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut idx = Vec::with_capacity(h2 * w2 * d);
    for r in 0..h2 {
        for c in 0..w2 {
            let src_row = (r / 2) * w + c / 2;
            let q = (r % 2) * 2 + c % 2;
            for ch in 0..d {
                idx.push(src_row * 4 * d + q * d + ch);
            }
        }
    }
    idx
}

/// Upsamples the `n × d` patch rows (raster order over a `grid_h × grid_w`
/// grid) to the `(H/4·W/4) × d` feature map `F^V`, also in raster order.
/// `activate` applies GELU after each stage.
pub fn upsample_features(
    g: &mut Graph,
    patch_rows: Var,
    up: &Upsampler,
    grid: (usize, usize),
    activate: bool,
) -> Result<Var> {
    let (n, d) = g.shape(patch_rows);
    if n != grid.0 * grid.1 {
        return Err(Error::ShapeMismatch(format!(
            "{n} patch rows for a {}x{} grid",
            grid.0, grid.1
        )));
    }
    let (mut h, mut w) = grid;
    let mut x = patch_rows;
    for stage in &up.stages {
        x = stage.linear.forward(g, x);
        if stage.doubles {
            let idx = pixel_shuffle_indices(h, w, d);
            h *= 2;
            w *= 2;
            x = g.permute(x, h * w, d, idx);
        }
        if activate {
            x = g.gelu(x);
        }
    }
    Ok(x)
}

/// `p̂ = mean_j σ(F^V · projⱼᵀ)`: every projection (`1 × d`) gives one
/// similarity map; the maps are averaged. Returns `p̂` and the individual
/// probability maps, each `(H/4·W/4) × 1`.
pub fn fuse_probability_maps(g: &mut Graph, features: Var, projections: &[Var]) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(features).1;
    if projections.is_empty() || projections.iter().any(|&p| g.shape(p) != (1, d)) {
        return Err(Error::ShapeMismatch(format!(
            "fusion needs 1x{d} projections, got {:?}",
            projections.iter().map(|&p| g.shape(p)).collect::<Vec<_>>()
        )));
    }
    let maps: Vec<Var> = projections
        .iter()
        .map(|&p| {
            let logits = g.matmul_nt(features, p);
            g.sigmoid(logits)
        })
        .collect();
    let mut acc = maps[0];
    for &m in &maps[1..] {
        acc = g.add(acc, m);
    }
    let fused = g.scale(acc, 1.0 / maps.len() as f64);
    Ok((fused, maps))
}

/// `−(1/N) Σᵢ [min(1, γ + sᵢ)/τ − log Σ_{k∈𝒩ᵢ} exp(s_k/τ)]`.
///
/// `positives` is `1 × N`; `negatives[i]` is the `1 × |𝒩ᵢ|` row of negative
/// similarities for expression `i`.
pub fn positive_margin_contrastive(
    g: &mut Graph,
    positives: Var,
    negatives: &[Var],
    gamma: f64,
    tau: f64,
) -> Result<Var> {
    let n = g.shape(positives).1;
    if negatives.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} positives with {} negative sets",
            negatives.len()
        )));
    }
    if let Some(i) = negatives.iter().position(|&s| g.shape(s).1 == 0) {
        return Err(Error::EmptyNegatives(i));
    }
    let shifted = g.add_scalar(positives, gamma);
    let capped = g.min_const(shifted, 1.0);
    let pos = g.scale(capped, 1.0 / tau);
    let mut denoms = Vec::with_capacity(n);
    for &neg in negatives {
        let scaled = g.scale(neg, 1.0 / tau);
        denoms.push(g.logsumexp_rows(scaled));
    }
    let denom = g.concat_cols(&denoms);
    let diff = g.sub(pos, denom);
    let m = g.mean(diff);
    Ok(g.scale(m, -1.0))
}

/// Nearest-neighbour downsampling of a ground-truth mask to the probability
/// map grid, as an `(h·w) × 1` column of 0/1.
pub fn mask_target(mask: &Mask, h: usize, w: usize) -> Matrix {
    let small = mask.resize_nearest(h, w);
    Matrix::from_fn(h * w, 1, |i, _| if small.data()[i] { 1.0 } else { 0.0 })
}

/// Mean binary cross-entropy and the smoothed dice loss
/// `1 − (2Σpg + 1)/(Σp + Σg + 1)`.
pub fn segmentation_loss(g: &mut Graph, prob: Var, target: &Matrix) -> Result<(Var, Var)> {
    if g.shape(prob) != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "probability map {:?} against target {:?}",
            g.shape(prob),
            target.shape()
        )));
    }
    let bce = g.bce_prob(prob, target.clone());
    let t = g.constant(target.clone());
    let inter = g.mul(prob, t);
    let inter = g.sum(inter);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, 1.0);
    let psum = g.sum(prob);
    let den = g.add_scalar(psum, target.sum() + 1.0);
    let ratio = g.div(num, den);
    let neg = g.scale(ratio, -1.0);
    let dice = g.add_scalar(neg, 1.0);
    Ok((bce, dice))
}

/// Learned empty token with a single-head cross-attention over the encoder
/// output and a linear classifier.
#[derive(Clone, Copy, Debug)]
pub struct GresHead {
    pub empty_token: ParamId,
    pub norm: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub classifier: Linear,
}

impl GresHead {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d;
        Self {
            empty_token: nn::embedding(store, "gres.empty_token", 1, d, rng),
            norm: Norm::new(store, "gres.norm", d),
            query: Linear::new(store, "gres.query", d, d, rng),
            key: Linear::new(store, "gres.key", d, d, rng),
            value: Linear::new(store, "gres.value", d, d, rng),
            classifier: Linear::new(store, "gres.classifier", d, 1, rng),
        }
    }

    /// The `1 × 1` empty logit: `classifier(e + softmax(q·Kᵀ/√d)·V)` with
    /// `q` from the empty token `e` and keys/values from every encoder row.
    pub fn logit(&self, g: &mut Graph, encoded: &EmbeddingSet) -> Var {
        let rows = g.concat_rows(&encoded.streams());
        let d = g.shape(rows).1;
        let x = self.norm.forward(g, rows);
        let e = g.param(self.empty_token);
        let q = self.query.forward(g, e);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let scores = g.matmul_nt(q, k);
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax_rows(scores);
        let ctx = g.matmul(attn, v);
        let h = g.add(e, ctx);
        self.classifier.forward(g, h)
    }
}

/// Empty logit and its binary cross-entropy against the no-target flag.
pub fn gres_no_target_loss(
    g: &mut Graph,
    head: Option<&GresHead>,
    encoded: &EmbeddingSet,
    no_target: bool,
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    let head = match head {
        Some(h) if cfg.gres_enabled => h,
        _ => return Err(Error::DisabledFeature("no-target classification")),
    };
    let logit = head.logit(g, encoded);
    let label = Matrix::scalar(if no_target { 1.0 } else { 0.0 });
    let bce = g.bce_logits(logit, label);
    Ok((logit, bce))
}

/// Scalar breakdown of one batch loss, each a batch mean.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub pos_cont: f64,
    pub bce: f64,
    pub dice: f64,
    pub gres_bce: Option<f64>,
    /// Cosine similarity `cos(t_o, zⁱ_o)` per sample and expression.
    pub similarities: Vec<Vec<f64>>,
}
