//! Whole-model gradients against central finite differences.

use latent_vg::autograd::Graph;
use latent_vg::config::{ModelConfig, SubjectMode};
use latent_vg::model::LatentVg;
use latent_vg::rng::{seed_all, RngStreams};
use latent_vg::sample::{BoundingBox, Image, Mask, SceneSample};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
const FLOOR: f64 = 1e-6;

fn random_sample(id: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> SceneSample {
    let (h, w) = (cfg.image_h, cfg.image_w);
    let image = Image::from_bytes(h, w, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap();
    let (r0, c0) = (rng.random_range(0..h / 2), rng.random_range(0..w / 2));
    let gt_mask = Mask::from_fn(h, w, |r, c| (r0..r0 + h / 3).contains(&r) && (c0..c0 + w / 3).contains(&c));
    SceneSample {
        id,
        image,
        token_ids: (0..5).map(|_| rng.random_range(1..cfg.vocab_size)).collect(),
        expression: String::new(),
        gt_box: Some(BoundingBox {
            x_min: c0,
            y_min: r0,
            x_max: c0 + w / 3 - 1,
            y_max: r0 + h / 3 - 1,
        }),
        gt_mask,
        no_target: false,
    }
}

fn loss(model: &LatentVg, batch: &[&SceneSample], noise: &RngStreams) -> f64 {
    let mut g = Graph::new(&model.store);
    let mut streams = noise.clone();
    model.batch_loss(&mut g, batch, Some(&mut streams)).unwrap().report.total
}

pub struct GradReport {
    pub within: usize,
    pub total: usize,
    pub worst: String,
}

impl GradReport {
    pub fn fraction(&self) -> f64 {
        self.within as f64 / self.total as f64
    }
}

pub fn plain_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        subject_mode: SubjectMode::Soft,
        seed: 5,
        ..ModelConfig::tiny()
    }
}

pub fn gres_config() -> ModelConfig {
    ModelConfig {
        subject_mode: SubjectMode::Soft,
        gres_enabled: true,
        seed: 6,
        ..ModelConfig::tiny()
    }
}

pub fn check(cfg: ModelConfig) -> GradReport {
    assert_eq!(cfg.num_patches(), 16);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples: Vec<SceneSample> = (0..2).map(|i| random_sample(i, &cfg, &mut rng)).collect();
    let batch: Vec<&SceneSample> = samples.iter().collect();
    let mut model = LatentVg::new(cfg).unwrap();
    let noise = seed_all(11);

    let grads = {
        let mut g = Graph::new(&model.store);
        let mut streams = noise.clone();
        let out = model.batch_loss(&mut g, &batch, Some(&mut streams)).unwrap();
        g.backward(out.total).into_params()
    };

    let ids: Vec<_> = model.store.iter().map(|(id, _, _)| id).collect();
    let mut total = 0usize;
    let mut within = 0usize;
    let mut worst = (0.0f64, String::new());
    for id in ids {
        let name = model.store.name(id).to_string();
        let n = model.store.get(id).len();
        for k in 0..n {
            let orig = model.store.get(id).data()[k];
            model.store.get_mut(id).data_mut()[k] = orig + STEP;
            let up = loss(&model, &batch, &noise);
            model.store.get_mut(id).data_mut()[k] = orig - STEP;
            let down = loss(&model, &batch, &noise);
            model.store.get_mut(id).data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads.get(&id).map_or(0.0, |g| g.data()[k]);
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(FLOOR);
            total += 1;
            if err < REL_TOL {
                within += 1;
            } else if err > worst.0 {
                worst = (err, format!("{name}[{k}]: analytic {analytic:e}, numeric {numeric:e}"));
            }
        }
    }
    GradReport {
        within,
        total,
        worst: worst.1,
    }
}
