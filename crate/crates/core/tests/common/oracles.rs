//! Plain-loop recomputations of each operation on random instances. Every
//! check returns the largest absolute deviation it saw.

use latent_vg::autograd::{Graph, ParamStore};
use latent_vg::concept::{inject_concepts, retrieve_visual_concepts};
use latent_vg::config::{DropoutMode, InjectMode};
use latent_vg::latent::{length_transform, semantic_dropout};
use latent_vg::metrics::{aggregate, EvalPair};
use latent_vg::objectives::{fuse_probability_maps, positive_margin_contrastive, segmentation_loss};
use latent_vg::rng::{self, Rng};
use latent_vg::sample::Mask;
use latent_vg::tensor::Matrix;
use rand::{Rng as _, SeedableRng};

pub const INSTANCES: u64 = 120;
pub const TOL: f64 = 1e-6;

type Grid = Vec<Vec<f64>>;

fn rng_for(test: u64, i: u64) -> Rng {
    Rng::seed_from_u64(test * 10_000 + i)
}

fn random_grid(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Grid {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

fn to_matrix(g: &Grid) -> Matrix {
    Matrix::from_rows(g).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_err(a: &Matrix, b: &Grid) -> f64 {
    assert_eq!(a.rows(), b.len());
    let mut worst: f64 = 0.0;
    for (r, row) in b.iter().enumerate() {
        assert_eq!(a.cols(), row.len());
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((a.get(r, c) - v).abs());
        }
    }
    worst
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn latent_attribute_construction_error() -> f64 {
    let store = ParamStore::new();
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut r = rng_for(1, i);
        let m = r.random_range(1..7);
        let m_max = m + r.random_range(0..3);
        let k = r.random_range(1..6);
        let d = r.random_range(1..6);
        let p = [0.0, 0.2, 0.5][(i % 3) as usize];
        let tokens = random_grid(&mut r, m, d, 1.0);
        let phi = random_grid(&mut r, k, m_max, 1.0);

        let mut drop_rng = rng::stream(i, 7);
        let mut oracle_rng = drop_rng.clone();
        let mut g = Graph::inference(&store);
        let t = g.constant(to_matrix(&tokens));
        let ph = g.constant(to_matrix(&phi));
        let dropped = semantic_dropout(&mut g, t, p, DropoutMode::Row, Some(&mut drop_rng));
        let out = length_transform(&mut g, dropped, ph).unwrap();

        let keep: Vec<f64> = (0..m)
            .map(|_| if p > 0.0 && rng::uniform(&mut oracle_rng) < p { 0.0 } else { 1.0 })
            .collect();
        let expect: Grid = (0..k)
            .map(|row| {
                (0..d)
                    .map(|c| (0..m).map(|j| phi[row][j] * keep[j] * tokens[j][c]).sum())
                    .collect()
            })
            .collect();
        worst = worst.max(max_err(g.value(out), &expect));
    }
    worst
}

pub fn concept_retrieval_error() -> f64 {
    let store = ParamStore::new();
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut r = rng_for(2, i);
        let nc = r.random_range(1..9);
        let ntr = r.random_range(1..7);
        let d = r.random_range(1..6);
        let concepts = random_grid(&mut r, nc, d, 1.5);
        let patches = random_grid(&mut r, ntr, d, 1.5);
        let mut g = Graph::inference(&store);
        let c = g.constant(to_matrix(&concepts));
        let p = g.constant(to_matrix(&patches));
        let out = retrieve_visual_concepts(&mut g, c, p).unwrap();

        let expect: Grid = concepts
            .iter()
            .map(|cr| {
                let w = softmax(&patches.iter().map(|pr| dot(cr, pr)).collect::<Vec<_>>());
                (0..d)
                    .map(|col| (0..ntr).map(|j| w[j] * patches[j][col]).sum())
                    .collect()
            })
            .collect();
        worst = worst.max(max_err(g.value(out), &expect));
    }
    worst
}

pub fn slot_injection_error() -> f64 {
    let store = ParamStore::new();
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut r = rng_for(3, i);
        let d = r.random_range(1..6);
        let nc = r.random_range(1..8);
        let counts: Vec<usize> = (0..r.random_range(1..4)).map(|_| r.random_range(1..5)).collect();
        let blocks: Vec<Grid> = counts.iter().map(|&n| random_grid(&mut r, n, d, 1.0)).collect();
        let cv = random_grid(&mut r, nc, d, 1.0);
        let mode = if i % 2 == 0 { InjectMode::Residual } else { InjectMode::Replace };

        let mut g = Graph::inference(&store);
        let vars: Vec<_> = blocks.iter().map(|b| g.constant(to_matrix(b))).collect();
        let c = g.constant(to_matrix(&cv));
        let inj = inject_concepts(&mut g, &vars, c, mode).unwrap();

        let all: Grid = blocks.iter().flatten().cloned().collect();
        let na = all.len();
        // Column-wise softmax over the attribute axis.
        let mut w = vec![vec![0.0; nc]; na];
        for col in 0..nc {
            let column = softmax(&all.iter().map(|a| dot(a, &cv[col])).collect::<Vec<_>>());
            for (row, v) in column.into_iter().enumerate() {
                w[row][col] = v;
            }
        }
        worst = worst.max(max_err(&inj.slot_weights, &w));
        let mut row = 0;
        for (b, &out) in blocks.iter().zip(&inj.attributes) {
            let expect: Grid = b
                .iter()
                .map(|a| {
                    let wr = &w[row];
                    row += 1;
                    (0..d)
                        .map(|col| {
                            let inc: f64 = (0..nc).map(|j| wr[j] * cv[j][col]).sum();
                            match mode {
                                InjectMode::Residual => a[col] + inc,
                                InjectMode::Replace => inc,
                            }
                        })
                        .collect()
                })
                .collect();
            worst = worst.max(max_err(g.value(out), &expect));
        }
    }
    worst
}

pub fn margin_contrastive_error() -> f64 {
    let store = ParamStore::new();
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut r = rng_for(4, i);
        let n = r.random_range(1..5);
        let gamma = r.random_range(0.0..1.0);
        let tau = r.random_range(0.05..2.0);
        let pos: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let negs: Grid = (0..n)
            .map(|_| (0..r.random_range(1..6)).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let mut g = Graph::inference(&store);
        let p = g.constant(Matrix::row_vector(&pos));
        let nv: Vec<_> = negs.iter().map(|s| g.constant(Matrix::row_vector(s))).collect();
        let loss = positive_margin_contrastive(&mut g, p, &nv, gamma, tau).unwrap();

        let mut total = 0.0;
        for (s, set) in pos.iter().zip(&negs) {
            let num = ((gamma + s).min(1.0) / tau).exp();
            let den: f64 = set.iter().map(|x| (x / tau).exp()).sum();
            total += (num / den).ln();
        }
        let expect = -total / n as f64;
        worst = worst.max((g.value(loss).item() - expect).abs());
    }
    worst
}

pub fn fused_map_error() -> f64 {
    let store = ParamStore::new();
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut r = rng_for(5, i);
        let pixels = r.random_range(1..30);
        let d = r.random_range(1..7);
        let n_proj = r.random_range(1..5);
        let feats = random_grid(&mut r, pixels, d, 1.0);
        let projs = random_grid(&mut r, n_proj, d, 2.0);
        let mut g = Graph::inference(&store);
        let f = g.constant(to_matrix(&feats));
        let pv: Vec<_> = projs.iter().map(|p| g.constant(Matrix::row_vector(p))).collect();
        let (fused, maps) = fuse_probability_maps(&mut g, f, &pv).unwrap();

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expect: Grid = feats
            .iter()
            .map(|fr| vec![projs.iter().map(|p| sig(dot(fr, p))).sum::<f64>() / n_proj as f64])
            .collect();
        worst = worst.max(max_err(g.value(fused), &expect));
        for (m, p) in maps.iter().zip(&projs) {
            let e: Grid = feats.iter().map(|fr| vec![sig(dot(fr, p))]).collect();
            worst = worst.max(max_err(g.value(*m), &e));
        }
    }
    worst
}

pub fn segmentation_loss_error() -> f64 {
    let store = ParamStore::new();
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut r = rng_for(6, i);
        let n = r.random_range(1..40);
        let prob: Vec<f64> = (0..n).map(|_| r.random_range(0.01..0.99)).collect();
        let target: Vec<f64> = (0..n).map(|_| f64::from(u8::from(r.random_bool(0.4)))).collect();
        let mut g = Graph::inference(&store);
        let p = g.constant(Matrix::col_vector(&prob));
        let (bce, dice) = segmentation_loss(&mut g, p, &Matrix::col_vector(&target)).unwrap();

        let bce_ref = -prob
            .iter()
            .zip(&target)
            .map(|(p, t)| t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            .sum::<f64>()
            / n as f64;
        let inter: f64 = prob.iter().zip(&target).map(|(p, t)| p * t).sum();
        let dice_ref = 1.0 - (2.0 * inter + 1.0) / (prob.iter().sum::<f64>() + target.iter().sum::<f64>() + 1.0);
        worst = worst.max((g.value(bce).item() - bce_ref).abs());
        worst = worst.max((g.value(dice).item() - dice_ref).abs());
    }
    worst
}

pub fn metric_aggregation_error() -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut r = rng_for(7, i);
        let (h, w) = (r.random_range(1..8), r.random_range(1..8));
        let n = r.random_range(1..10);
        let masks: Vec<(Mask, Mask, bool)> = (0..n)
            .map(|_| {
                let density = r.random_range(0.0..1.0);
                let pred = Mask::from_vec(h, w, (0..h * w).map(|_| r.random_bool(density)).collect()).unwrap();
                let gt = Mask::from_vec(h, w, (0..h * w).map(|_| r.random_bool(0.5)).collect()).unwrap();
                (pred, gt, false)
            })
            .collect();
        let pairs: Vec<EvalPair> = masks
            .iter()
            .map(|(p, g, nt)| EvalPair {
                pred_mask: p,
                gt_mask: g,
                pred_box: None,
                gt_box: None,
                no_target: *nt,
                empty_decision: None,
            })
            .collect();
        let report = aggregate(&pairs, false).unwrap();

        let mut ious = Vec::new();
        let (mut ti, mut tu) = (0.0, 0.0);
        for (p, g, _) in &masks {
            let mut inter = 0.0;
            let mut union = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let (a, b) = (p.get(y, x), g.get(y, x));
                    if a && b {
                        inter += 1.0;
                    }
                    if a || b {
                        union += 1.0;
                    }
                }
            }
            ti += inter;
            tu += union;
            ious.push(if union == 0.0 { 1.0 } else { inter / union });
        }
        let miou = ious.iter().sum::<f64>() / n as f64;
        let oiou = if tu == 0.0 { 1.0 } else { ti / tu };
        worst = worst.max((report.miou - miou).abs()).max((report.oiou - oiou).abs());
        for (k, t) in [0.5, 0.7, 0.9].iter().enumerate() {
            let frac = ious.iter().filter(|&&v| v > *t).count() as f64 / n as f64;
            worst = worst.max((report.prec_at[k] - frac).abs());
        }
    }
    worst
}
