//! Model configuration and its flat `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How attribute tokens absorb the injected visual concepts each layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InjectMode {
    /// `A ← A + Ǎ`
    Residual,
    /// `A ← Ǎ`
    Replace,
}

/// Granularity of the semantic dropout mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropoutMode {
    /// Whole token rows are dropped.
    Row,
    /// Independent entries are dropped.
    Element,
}

/// Forward behaviour of subject selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubjectMode {
    /// Straight-through: hard one-hot forward, soft gradient.
    Hard,
    /// Soft weights in the forward pass too (smooth, for gradient checks).
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channel dimension.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the visual and textual feed-forward experts.
    pub ffn_hidden: usize,
    /// Patch size in pixels.
    pub patch: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub vocab_size: usize,
    pub m_max: usize,
    /// Attribute token count per latent expression; its length is N.
    pub k_list: Vec<usize>,
    /// Semantic dropout probability per latent expression.
    pub p_drop_list: Vec<f64>,
    pub n_concepts: usize,
    pub gamma: f64,
    pub tau: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub mask_threshold: f64,
    pub gres_enabled: bool,
    pub gres_loss_weight: f64,
    pub seed: u64,
    pub subject_distributor: bool,
    pub concept_injector: bool,
    pub inject_mode: InjectMode,
    pub dropout_mode: DropoutMode,
    pub per_layer_concepts: bool,
    /// Also use other samples' text projections as contrastive negatives.
    pub text_negatives: bool,
    pub subject_mode: SubjectMode,
    pub gumbel_temperature: f64,
    /// The empty (no-target) decision fires when its logit exceeds this.
    pub empty_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 4,
            heads: 4,
            ffn_hidden: 128,
            patch: 8,
            image_h: 64,
            image_w: 64,
            vocab_size: 64,
            m_max: 12,
            k_list: vec![4, 10],
            p_drop_list: vec![0.2, 0.15],
            n_concepts: 100,
            gamma: 0.2,
            tau: 1.0,
            lambda_bce: 2.0,
            lambda_dice: 0.5,
            mask_threshold: 0.35,
            gres_enabled: false,
            gres_loss_weight: 0.5,
            seed: 0,
            subject_distributor: true,
            concept_injector: true,
            inject_mode: InjectMode::Residual,
            dropout_mode: DropoutMode::Row,
            per_layer_concepts: false,
            text_negatives: false,
            subject_mode: SubjectMode::Hard,
            gumbel_temperature: 1.0,
            empty_threshold: 0.0,
        }
    }
}

/// Component switches used for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    NoLatent,
    NoSubjectDistributor,
    NoConceptInjector,
    NoMargin,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-latent" => Ok(Ablation::NoLatent),
            "no-sd" => Ok(Ablation::NoSubjectDistributor),
            "no-vci" => Ok(Ablation::NoConceptInjector),
            "no-margin" => Ok(Ablation::NoMargin),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected no-latent, no-sd, no-vci or no-margin)"
            ))),
        }
    }
}

impl ModelConfig {
    /// The small model used by gradient checks: d=8, L=2, 16 patches.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            layers: 2,
            heads: 2,
            ffn_hidden: 16,
            patch: 8,
            image_h: 32,
            image_w: 32,
            vocab_size: 16,
            m_max: 6,
            k_list: vec![2, 3],
            p_drop_list: vec![0.2, 0.15],
            n_concepts: 12,
            ..Self::default()
        }
    }

    /// Number of latent expressions N.
    pub fn n_latent(&self) -> usize {
        self.k_list.len()
    }

    pub fn has_latents(&self) -> bool {
        !self.k_list.is_empty()
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch
    }

    /// Patch count n, always derived from the image and patch size.
    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Side lengths of the probability map (a quarter of the image).
    pub fn map_hw(&self) -> (usize, usize) {
        (self.image_h / 4, self.image_w / 4)
    }

    /// Whether the concept injector actually runs.
    pub fn injects(&self) -> bool {
        self.concept_injector && self.has_latents()
    }

    /// Whether the subject distributor runs; GRES mode removes it.
    pub fn distributes(&self) -> bool {
        self.subject_distributor && self.has_latents() && !self.gres_enabled
    }

    pub fn apply(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::NoLatent => {
                self.k_list.clear();
                self.p_drop_list.clear();
            }
            Ablation::NoSubjectDistributor => self.subject_distributor = false,
            Ablation::NoConceptInjector => self.concept_injector = false,
            Ablation::NoMargin => self.gamma = 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.ffn_hidden == 0 || self.vocab_size == 0 {
            return fail("ffn_hidden and vocab_size must be positive".into());
        }
        if !matches!(self.patch, 4 | 8 | 16) {
            return fail(format!(
                "patch={} unsupported: the decoder reaches a quarter-resolution map only for 4, 8 or 16",
                self.patch
            ));
        }
        if self.image_h == 0
            || self.image_w == 0
            || self.image_h % self.patch != 0
            || self.image_w % self.patch != 0
        {
            return fail(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                self.image_h, self.image_w, self.patch
            ));
        }
        if self.k_list.len() != self.p_drop_list.len() {
            return fail(format!(
                "k_list has {} entries but p_drop_list has {}",
                self.k_list.len(),
                self.p_drop_list.len()
            ));
        }
        if self.k_list.iter().any(|&k| k == 0) {
            return fail("every k must be at least 1".into());
        }
        if self.p_drop_list.iter().any(|p| !(0.0..1.0).contains(p)) {
            return fail("every dropout probability must lie in [0, 1)".into());
        }
        if self.has_latents() && self.n_concepts == 0 {
            return fail("n_concepts must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma={} outside [0, 1]", self.gamma));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return fail(format!("tau={} must be positive", self.tau));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return fail(format!("mask_threshold={} outside (0, 1)", self.mask_threshold));
        }
        if self.gumbel_temperature <= 0.0 {
            return fail("gumbel_temperature must be positive".into());
        }
        if self.lambda_bce < 0.0 || self.lambda_dice < 0.0 || self.gres_loss_weight < 0.0 {
            return fail("loss weights must be non-negative".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        text.parse()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    /// Every key, one `key = value` line each.
    pub fn to_file_string(&self) -> String {
        fn list<T: ToString>(xs: &[T]) -> String {
            xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("d", self.d.to_string());
        kv("layers", self.layers.to_string());
        kv("heads", self.heads.to_string());
        kv("ffn_hidden", self.ffn_hidden.to_string());
        kv("patch", self.patch.to_string());
        kv("image_hw", format!("{},{}", self.image_h, self.image_w));
        kv("vocab_size", self.vocab_size.to_string());
        kv("m_max", self.m_max.to_string());
        kv("n_latent", self.n_latent().to_string());
        kv("k_list", list(&self.k_list));
        kv("p_drop_list", list(&self.p_drop_list));
        kv("n_concepts", self.n_concepts.to_string());
        kv("gamma", self.gamma.to_string());
        kv("tau", self.tau.to_string());
        kv("lambda_bce", self.lambda_bce.to_string());
        kv("lambda_dice", self.lambda_dice.to_string());
        kv("mask_threshold", self.mask_threshold.to_string());
        kv("gres_enabled", self.gres_enabled.to_string());
        kv("gres_loss_weight", self.gres_loss_weight.to_string());
        kv("seed", self.seed.to_string());
        kv("subject_distributor", self.subject_distributor.to_string());
        kv("concept_injector", self.concept_injector.to_string());
        kv(
            "inject_mode",
            match self.inject_mode {
                InjectMode::Residual => "residual",
                InjectMode::Replace => "replace",
            }
            .into(),
        );
        kv(
            "dropout_mode",
            match self.dropout_mode {
                DropoutMode::Row => "row",
                DropoutMode::Element => "element",
            }
            .into(),
        );
        kv("per_layer_concepts", self.per_layer_concepts.to_string());
        kv("text_negatives", self.text_negatives.to_string());
        kv(
            "subject_mode",
            match self.subject_mode {
                SubjectMode::Hard => "hard",
                SubjectMode::Soft => "soft",
            }
            .into(),
        );
        kv("gumbel_temperature", self.gumbel_temperature.to_string());
        kv("empty_threshold", self.empty_threshold.to_string());
        s
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_num(key, x)).collect()
}

impl FromStr for ModelConfig {
    type Err = Error;

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    /// Unknown keys are rejected.
    fn from_str(text: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        let mut n_latent = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, v) = (key.trim(), value.trim());
            match key {
                "d" => c.d = parse_num(key, v)?,
                "layers" => c.layers = parse_num(key, v)?,
                "heads" => c.heads = parse_num(key, v)?,
                "ffn_hidden" => c.ffn_hidden = parse_num(key, v)?,
                "patch" => c.patch = parse_num(key, v)?,
                "image_hw" => {
                    let hw: Vec<usize> = parse_list(key, v)?;
                    match hw.as_slice() {
                        [s] => (c.image_h, c.image_w) = (*s, *s),
                        [h, w] => (c.image_h, c.image_w) = (*h, *w),
                        _ => return Err(Error::Config("image_hw takes one or two values".into())),
                    }
                }
                "vocab_size" => c.vocab_size = parse_num(key, v)?,
                "m_max" => c.m_max = parse_num(key, v)?,
                "n_latent" => n_latent = Some(parse_num::<usize>(key, v)?),
                "k_list" => c.k_list = parse_list(key, v)?,
                "p_drop_list" => c.p_drop_list = parse_list(key, v)?,
                "n_concepts" => c.n_concepts = parse_num(key, v)?,
                "gamma" => c.gamma = parse_num(key, v)?,
                "tau" => c.tau = parse_num(key, v)?,
                "lambda_bce" => c.lambda_bce = parse_num(key, v)?,
                "lambda_dice" => c.lambda_dice = parse_num(key, v)?,
                "mask_threshold" => c.mask_threshold = parse_num(key, v)?,
                "gres_enabled" => c.gres_enabled = parse_num(key, v)?,
                "gres_loss_weight" => c.gres_loss_weight = parse_num(key, v)?,
                "seed" => c.seed = parse_num(key, v)?,
                "subject_distributor" => c.subject_distributor = parse_num(key, v)?,
                "concept_injector" => c.concept_injector = parse_num(key, v)?,
                "inject_mode" => {
                    c.inject_mode = match v {
                        "residual" => InjectMode::Residual,
                        "replace" => InjectMode::Replace,
                        _ => return Err(Error::Config(format!("inject_mode: unknown {v:?}"))),
                    }
                }
                "dropout_mode" => {
                    c.dropout_mode = match v {
                        "row" => DropoutMode::Row,
                        "element" => DropoutMode::Element,
                        _ => return Err(Error::Config(format!("dropout_mode: unknown {v:?}"))),
                    }
                }
                "per_layer_concepts" => c.per_layer_concepts = parse_num(key, v)?,
                "text_negatives" => c.text_negatives = parse_num(key, v)?,
                "subject_mode" => {
                    c.subject_mode = match v {
                        "hard" => SubjectMode::Hard,
                        "soft" => SubjectMode::Soft,
                        _ => return Err(Error::Config(format!("subject_mode: unknown {v:?}"))),
                    }
                }
                "gumbel_temperature" => c.gumbel_temperature = parse_num(key, v)?,
                "empty_threshold" => c.empty_threshold = parse_num(key, v)?,
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        if let Some(n) = n_latent {
            if n != c.k_list.len() {
                return Err(Error::Config(format!(
                    "n_latent = {n} disagrees with k_list of length {}",
                    c.k_list.len()
                )));
            }
        }
        c.validate()?;
        Ok(c)
    }
}
