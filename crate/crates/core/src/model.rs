//! The assembled model: parameters, the per-sample forward pass and the
//! batch loss.

use crate::autograd::{Graph, ParamStore, Var};
use crate::concept::ConceptBank;
use crate::config::ModelConfig;
use crate::embed::{self, EmbedParams, EmbeddingSet, LATENT_CLS_ROW};
use crate::encoder::{self, EncodeTrace, EncoderLayerParams};
use crate::error::{Error, Result};
use crate::latent::{self, LatentParams, SubjectSelection};
use crate::nn::Norm;
use crate::objectives::{self, GresHead, LossReport, ProjectionHeads, Upsampler};
use crate::rng::{seed_all, RngStreams};
use crate::sample::{Image, SceneSample};

/// Handles of every parameter group.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub embed: EmbedParams,
    pub latent: Option<LatentParams>,
    pub layers: Vec<EncoderLayerParams>,
    pub concepts: Option<ConceptBank>,
    pub visual_norm: Norm,
    pub heads: ProjectionHeads,
    pub upsampler: Upsampler,
    pub gres: Option<GresHead>,
}

impl ModelParams {
    /// Registers every parameter in `store`, drawing initial values from
    /// `streams.init`.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, streams: &mut RngStreams) -> Result<Self> {
        let rng = &mut streams.init;
        let embed = EmbedParams::new(store, cfg, rng);
        let latent = cfg.has_latents().then(|| LatentParams::new(store, cfg, rng));
        let layers = (0..cfg.layers)
            .map(|l| EncoderLayerParams::new(store, l, cfg, rng))
            .collect();
        let concepts = cfg.injects().then(|| ConceptBank::new(store, cfg, rng));
        let visual_norm = Norm::new(store, "visual_norm", cfg.d);
        let heads = ProjectionHeads::new(store, cfg, rng);
        let upsampler = Upsampler::new(store, cfg, rng)?;
        let gres = cfg.gres_enabled.then(|| GresHead::new(store, cfg, rng));
        Ok(Self {
            embed,
            latent,
            layers,
            concepts,
            visual_norm,
            heads,
            upsampler,
            gres,
        })
    }
}

/// Configuration plus trained state.
#[derive(Clone, Debug)]
pub struct LatentVg {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: ModelParams,
}

/// Everything one forward pass produces for a single sample.
pub struct SampleOutput {
    pub encoded: EmbeddingSet,
    pub selection: Option<SubjectSelection>,
    /// `t_o`, `1 × d`.
    pub text_projection: Var,
    /// `zⁱ_o`, each `1 × d`.
    pub latent_projections: Vec<Var>,
    /// Fused map `p̂`, `(H/4·W/4) × 1`.
    pub prob: Var,
    /// Text map first, then one per latent expression.
    pub maps: Vec<Var>,
    pub empty_logit: Option<Var>,
}

/// Loss graph outputs for a batch.
pub struct BatchLoss {
    pub total: Var,
    pub report: LossReport,
    pub outputs: Vec<SampleOutput>,
}

impl LatentVg {
    /// A freshly initialized model; initialization depends only on
    /// `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut streams = seed_all(config.seed);
        let params = ModelParams::new(&mut store, &config, &mut streams)?;
        Ok(Self {
            config,
            store,
            params,
        })
    }

    /// Rebuilds the parameter layout for `config` and fills it from `store`
    /// by name.
    pub fn from_parts(config: ModelConfig, loaded: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        if loaded.len() != model.store.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} tensors, model needs {}", loaded.len(), model.store.len()),
            ));
        }
        let ids: Vec<_> = model.store.iter().map(|(id, name, _)| (id, name.to_string())).collect();
        for (id, name) in ids {
            let src = loaded
                .id(&name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
            model.store.set(id, loaded.get(src).clone())?;
        }
        Ok(model)
    }

    /// Names of the parameters that exist only for latent expressions.
    pub fn latent_param_names(&self) -> Vec<String> {
        self.store
            .iter()
            .map(|(_, n, _)| n)
            .filter(|n| n.contains("latent") || n.starts_with("concepts"))
            .map(str::to_string)
            .collect()
    }

    /// Embedding, latent initialization, encoder, heads and decoder for one
    /// sample. `noise` enables semantic dropout and Gumbel noise (training);
    /// `None` is the deterministic inference path.
    pub fn forward_sample(
        &self,
        g: &mut Graph,
        image: &Image,
        token_ids: &[usize],
        noise: Option<&mut RngStreams>,
        trace: Option<&mut EncodeTrace>,
    ) -> Result<SampleOutput> {
        let cfg = &self.config;
        let p = &self.params;
        let embeds = embed::embed_inputs(g, &p.embed, image, token_ids, cfg)?;
        let (embeds, selection) = match &p.latent {
            Some(lp) => {
                let (e, s) = latent::initialize(g, lp, embeds, cfg, noise)?;
                (e, Some(s))
            }
            None => (embeds, None),
        };
        let encoded = encoder::encode(g, embeds, &p.layers, p.concepts.as_ref(), cfg, trace)?;

        let n = cfg.num_patches();
        let patches = g.slice_rows(encoded.visual, 1, n);
        let patches = p.visual_norm.forward(g, patches);
        let features = objectives::upsample_features(g, patches, &p.upsampler, (cfg.grid_h(), cfg.grid_w()), true)?;

        let text_cls = g.row(encoded.textual, 0);
        let text_projection = p.heads.project_text(g, text_cls);
        let mut latent_projections = Vec::with_capacity(encoded.latents.len());
        for &z in &encoded.latents {
            let cls = g.row(z, LATENT_CLS_ROW);
            latent_projections.push(p.heads.project_latent(g, cls)?);
        }
        let mut all = vec![text_projection];
        all.extend(&latent_projections);
        let (prob, maps) = objectives::fuse_probability_maps(g, features, &all)?;
        let empty_logit = match &p.gres {
            Some(head) if cfg.gres_enabled => Some(head.logit(g, &encoded)),
            _ => None,
        };
        Ok(SampleOutput {
            encoded,
            selection,
            text_projection,
            latent_projections,
            prob,
            maps,
            empty_logit,
        })
    }

    /// Mean loss over `batch`: positive-margin contrastive term against the
    /// latent projections of the other samples, BCE and dice on the fused map,
    /// and the no-target classifier in GRES mode.
    pub fn batch_loss(&self, g: &mut Graph, batch: &[&SceneSample], mut noise: Option<&mut RngStreams>) -> Result<BatchLoss> {
        let cfg = &self.config;
        if batch.is_empty() || (cfg.has_latents() && batch.len() < 2) {
            return Err(Error::BatchTooSmall(batch.len()));
        }
        let outputs = batch
            .iter()
            .map(|s| self.forward_sample(g, &s.image, &s.token_ids, noise.as_deref_mut(), None))
            .collect::<Result<Vec<_>>>()?;

        let text_unit: Vec<Var> = outputs.iter().map(|o| g.normalize_rows(o.text_projection)).collect();
        let latent_unit: Vec<Option<Var>> = outputs
            .iter()
            .map(|o| {
                (!o.latent_projections.is_empty()).then(|| {
                    let z = g.concat_rows(&o.latent_projections);
                    g.normalize_rows(z)
                })
            })
            .collect();

        let (mh, mw) = cfg.map_hw();
        let mut terms = Vec::with_capacity(batch.len());
        let mut report = LossReport::default();
        for (b, sample) in batch.iter().enumerate() {
            let mut term = None;
            if let Some(zb) = latent_unit[b] {
                let positives = g.matmul_nt(text_unit[b], zb);
                report.similarities.push(g.value(positives).data().to_vec());
                let mut others: Vec<Var> = (0..batch.len())
                    .filter(|&o| o != b)
                    .filter_map(|o| latent_unit[o])
                    .collect();
                if cfg.text_negatives {
                    others.extend((0..batch.len()).filter(|&o| o != b).map(|o| text_unit[o]));
                }
                let others = g.concat_rows(&others);
                let negatives = g.matmul_nt(text_unit[b], others);
                let sets = vec![negatives; cfg.n_latent()];
                let pos = objectives::positive_margin_contrastive(g, positives, &sets, cfg.gamma, cfg.tau)?;
                report.pos_cont += g.value(pos).item();
                term = Some(pos);
            }

            let target = objectives::mask_target(&sample.gt_mask, mh, mw);
            let (bce, dice) = objectives::segmentation_loss(g, outputs[b].prob, &target)?;
            report.bce += g.value(bce).item();
            report.dice += g.value(dice).item();
            let bce_w = g.scale(bce, cfg.lambda_bce);
            let dice_w = g.scale(dice, cfg.lambda_dice);
            let seg = g.add(bce_w, dice_w);
            let mut t = match term {
                Some(pos) => g.add(pos, seg),
                None => seg,
            };

            if cfg.gres_enabled {
                let (_, gbce) =
                    objectives::gres_no_target_loss(g, self.params.gres.as_ref(), &outputs[b].encoded, sample.no_target, cfg)?;
                *report.gres_bce.get_or_insert(0.0) += g.value(gbce).item();
                let w = g.scale(gbce, cfg.gres_loss_weight);
                t = g.add(t, w);
            }
            terms.push(t);
        }

        let stacked = g.concat_rows(&terms);
        let total = g.mean(stacked);
        let n = batch.len() as f64;
        report.pos_cont /= n;
        report.bce /= n;
        report.dice /= n;
        if let Some(x) = report.gres_bce.as_mut() {
            *x /= n;
        }
        report.total = g.value(total).item();
        Ok(BatchLoss {
            total,
            report,
            outputs,
        })
    }
}
