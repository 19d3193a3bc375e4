//! Latent expression initialization.
//!
//! Each latent expression `Zⁱ₀ = [zⁱ_cls; s; Aⁱ₀]` is built from the word
//! tokens: a semantic dropout removes whole tokens, a learned length
//! transform maps the surviving `m` tokens to `kⁱ` attribute tokens, and a
//! subject token `s` picked from the words by a straight-through
//! Gumbel-softmax is shared by every expression and by the visual stream.

use crate::autograd::{softmax_rows, Graph, ParamId, ParamStore, Var};
use crate::config::{DropoutMode, ModelConfig, SubjectMode};
use crate::embed::{EmbeddingSet, LATENT_SUBJECT_ROW};
use crate::error::{Error, Result};
use crate::nn::{self, Linear};
use crate::rng::{self, Rng, RngStreams};
use crate::tensor::Matrix;

/// Learned parameters of the initializer.
#[derive(Clone, Debug)]
pub struct LatentParams {
    /// φⁱ, each `kⁱ × m_max`; texts shorter than `m_max` use the leading columns.
    pub phi: Vec<ParamId>,
    /// Scores each word token as the subject candidate (`d → 1`).
    pub selector: Linear,
    /// zⁱ_cls, each `1 × d`.
    pub cls: Vec<ParamId>,
    /// Per-slot attribute position embeddings, each `kⁱ × d`.
    pub attr_pos: Vec<ParamId>,
}

impl LatentParams {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let mut phi = Vec::new();
        let mut cls = Vec::new();
        let mut attr_pos = Vec::new();
        for (i, &k) in cfg.k_list.iter().enumerate() {
            let a = (6.0 / (k + cfg.m_max) as f64).sqrt();
            let m = Matrix::from_fn(k, cfg.m_max, |_, _| (rng::uniform(rng) * 2.0 - 1.0) * a);
            phi.push(store.add(format!("latent.{i}.phi"), m));
            cls.push(nn::embedding(store, &format!("latent.{i}.cls"), 1, cfg.d, rng));
            attr_pos.push(nn::embedding(store, &format!("latent.{i}.attr_pos"), k, cfg.d, rng));
        }
        Self {
            phi,
            selector: Linear::new(store, "latent.selector", cfg.d, 1, rng),
            cls,
            attr_pos,
        }
    }
}

/// The chosen subject token and its selection weights.
#[derive(Clone, Debug)]
pub struct SubjectSelection {
    /// Index among the word tokens (class token excluded).
    pub index: usize,
    /// Exactly one-hot.
    pub hard_weights: Vec<f64>,
    /// Softmax of the (noisy) logits; the gradient path.
    pub soft_weights: Vec<f64>,
    /// The subject embedding `s`, `1 × d`.
    pub subject: Var,
}

/// Zeroes each token row with probability `p` during training (or single
/// entries in [`DropoutMode::Element`]). No rescaling. Identity at inference
/// (`rng == None`) or when `p == 0`.
pub fn semantic_dropout(g: &mut Graph, tokens: Var, p: f64, mode: DropoutMode, rng: Option<&mut Rng>) -> Var {
    let Some(rng) = rng else { return tokens };
    if p <= 0.0 {
        return tokens;
    }
    let (m, d) = g.shape(tokens);
    let mask = match mode {
        DropoutMode::Row => {
            let keep: Vec<bool> = (0..m).map(|_| rng::uniform(rng) >= p).collect();
            Matrix::from_fn(m, d, |r, _| if keep[r] { 1.0 } else { 0.0 })
        }
        DropoutMode::Element => Matrix::from_fn(m, d, |_, _| if rng::uniform(rng) >= p { 1.0 } else { 0.0 }),
    };
    let mask = g.constant(mask);
    g.mul(tokens, mask)
}

/// `φ[:, :m] · tokens`, mapping `m` tokens to `k` tokens.
pub fn length_transform(g: &mut Graph, tokens: Var, phi: Var) -> Result<Var> {
    let (m, _) = g.shape(tokens);
    let (_, m_max) = g.shape(phi);
    if m == 0 || m > m_max {
        return Err(Error::ShapeMismatch(format!(
            "length transform over {m} tokens with {m_max} columns"
        )));
    }
    let phi = if m == m_max { phi } else { g.slice_cols(phi, 0, m) };
    Ok(g.matmul(phi, tokens))
}

/// Picks one of the `m` word tokens as the subject.
///
/// Logits come from `selector`; with `rng` present Gumbel noise is added
/// before the tempered softmax. The forward value of the subject is the
/// hard one-hot row times the tokens while gradients reach the soft weights
/// ([`SubjectMode::Soft`] uses the soft weights in the forward pass too).
pub fn select_subject(
    g: &mut Graph,
    tokens: Var,
    selector: &Linear,
    temperature: f64,
    mode: SubjectMode,
    rng: Option<&mut Rng>,
) -> Result<SubjectSelection> {
    let logits = selector.forward(g, tokens);
    let logits = g.transpose(logits);
    select_from_logits(g, tokens, logits, temperature, mode, rng)
}

/// [`select_subject`] with precomputed `1 × m` logits.
pub fn select_from_logits(
    g: &mut Graph,
    tokens: Var,
    logits: Var,
    temperature: f64,
    mode: SubjectMode,
    rng: Option<&mut Rng>,
) -> Result<SubjectSelection> {
    let (_, m) = g.shape(logits);
    if m == 0 {
        return Err(Error::ShapeMismatch("subject selection over zero tokens".into()));
    }
    let noisy = match rng {
        Some(rng) => {
            let noise = Matrix::from_fn(1, m, |_, _| rng::gumbel(rng));
            let noise = g.constant(noise);
            g.add(logits, noise)
        }
        None => logits,
    };
    let scaled = g.scale(noisy, 1.0 / temperature);
    let soft = g.softmax_rows(scaled);
    let soft_weights = g.value(soft).data().to_vec();
    let index = argmax(g.value(noisy).data());
    let mut hard_weights = vec![0.0; m];
    hard_weights[index] = 1.0;
    let weights = match mode {
        SubjectMode::Hard => g.straight_through(soft, Matrix::row_vector(&hard_weights)),
        SubjectMode::Soft => soft,
    };
    let subject = g.matmul(weights, tokens);
    Ok(SubjectSelection {
        index,
        hard_weights,
        soft_weights,
        subject,
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Softmax of a logit vector; exposed for selection-frequency oracles.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    softmax_rows(&Matrix::row_vector(xs)).into_vec()
}

/// Builds `Zⁱ₀ = [zⁱ_cls; s; φⁱ(Dⁱ ⊙ T̄₀) + posⁱ]` for every expression from the
/// `(m+1) × d` text stream. All expressions carry the same subject `s`.
pub fn build_latent_expressions(
    g: &mut Graph,
    params: &LatentParams,
    text_stream: Var,
    cfg: &ModelConfig,
    mut noise: Option<&mut RngStreams>,
) -> Result<(Vec<Var>, SubjectSelection)> {
    let (rows, _) = g.shape(text_stream);
    if rows < 2 {
        return Err(Error::ShapeMismatch(
            "latent expressions need at least one word token".into(),
        ));
    }
    let words = g.slice_rows(text_stream, 1, rows - 1);
    let selection = select_subject(
        g,
        words,
        &params.selector,
        cfg.gumbel_temperature,
        cfg.subject_mode,
        noise.as_deref_mut().map(|n| &mut n.gumbel),
    )?;
    let mut latents = Vec::with_capacity(cfg.n_latent());
    for i in 0..cfg.n_latent() {
        let dropped = semantic_dropout(
            g,
            words,
            cfg.p_drop_list[i],
            cfg.dropout_mode,
            noise.as_deref_mut().map(|n| &mut n.dropout),
        );
        let phi = g.param(params.phi[i]);
        let attrs = length_transform(g, dropped, phi)?;
        let pos = g.param(params.attr_pos[i]);
        let attrs = g.add(attrs, pos);
        let cls = g.param(params.cls[i]);
        latents.push(g.concat_rows(&[cls, selection.subject, attrs]));
    }
    Ok((latents, selection))
}

/// Row 0 of the visual stream becomes the subject token.
pub fn install_visual_subject(g: &mut Graph, visual: Var, subject: Var) -> Var {
    g.replace_row(visual, 0, subject, 0)
}

/// Runs the whole initializer on an embedded input: latents appended and
/// the visual class slot replaced by the subject.
pub fn initialize(
    g: &mut Graph,
    params: &LatentParams,
    embeds: EmbeddingSet,
    cfg: &ModelConfig,
    noise: Option<&mut RngStreams>,
) -> Result<(EmbeddingSet, SubjectSelection)> {
    let (latents, selection) = build_latent_expressions(g, params, embeds.textual, cfg, noise)?;
    let visual = install_visual_subject(g, embeds.visual, selection.subject);
    debug_assert!(latents
        .iter()
        .all(|&z| g.value(z).row(LATENT_SUBJECT_ROW) == g.value(visual).row(0)));
    Ok((
        EmbeddingSet {
            visual,
            textual: embeds.textual,
            latents,
        },
        selection,
    ))
}
