//! Attention and concept-attribution dumps.
//!
//! Grids are written as PFM files (single channel, little-endian) and the
//! optional overlays as binary PPM.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::autograd::Graph;
use crate::embed::LATENT_CLS_ROW;
use crate::encoder::EncodeTrace;
use crate::error::{Error, Result};
use crate::model::LatentVg;
use crate::sample::Image;
use crate::tensor::Matrix;

/// Attention of each expression's class token over the image patches.
#[derive(Clone, Debug)]
pub struct AttentionDump {
    /// Text expression first, then each latent expression; each grid is
    /// `H/p × W/p` and sums to 1.
    pub grids: Vec<Matrix>,
    /// Slot-normalized injection weights per layer (attribute tokens of all
    /// latent expressions × concepts). Empty without the injector.
    pub concept_weights: Vec<Matrix>,
}

/// Runs the deterministic forward pass and collects the class-token to
/// patch attention, averaged over layers and heads.
pub fn attention_dump(model: &LatentVg, image: &Image, token_ids: &[usize]) -> Result<AttentionDump> {
    let cfg = &model.config;
    let mut g = Graph::inference(&model.store);
    let mut trace = EncodeTrace::default();
    let out = model.forward_sample(&mut g, image, token_ids, None, Some(&mut trace))?;
    if trace.attention.is_empty() {
        return Err(Error::DisabledFeature("attention tracing"));
    }

    let n = cfg.num_patches();
    let mut class_rows = vec![n + 1];
    let mut next = n + 1 + g.shape(out.encoded.textual).0;
    for &z in &out.encoded.latents {
        class_rows.push(next + LATENT_CLS_ROW);
        next += g.shape(z).0;
    }

    let layers = trace.attention.len() as f64;
    let grids = class_rows
        .iter()
        .map(|&row| {
            let mut grid = Matrix::zeros(cfg.grid_h(), cfg.grid_w());
            for attn in &trace.attention {
                for (p, v) in grid.data_mut().iter_mut().enumerate() {
                    *v += attn.get(row, 1 + p) / layers;
                }
            }
            let total: f64 = grid.data().iter().sum();
            if total > 0.0 {
                grid.scale_assign(1.0 / total);
            }
            grid
        })
        .collect();
    Ok(AttentionDump {
        grids,
        concept_weights: trace.concept_weights,
    })
}

/// Writes `m` as a grayscale PFM, top row first in memory.
pub fn write_pfm(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    write!(out, "Pf\n{} {}\n-1.0\n", m.cols(), m.rows())?;
    // PFM stores rows bottom to top.
    for r in (0..m.rows()).rev() {
        for c in 0..m.cols() {
            out.write_all(&(m.get(r, c) as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path)?;
    let bad = |d: &str| Error::format("pfm", d.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "Pf" {
        return Err(bad("not a grayscale PFM"));
    }
    let cols: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let rows: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("scale"))?;
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != rows * cols * 4 {
        return Err(bad("pixel data length"));
    }
    let value = |i: usize| {
        let b: [u8; 4] = data[4 * i..4 * i + 4].try_into().expect("4 bytes");
        if scale < 0.0 {
            f32::from_le_bytes(b) as f64
        } else {
            f32::from_be_bytes(b) as f64
        }
    };
    Ok(Matrix::from_fn(rows, cols, |r, c| value((rows - 1 - r) * cols + c)))
}

/// Blends a heat map of `grid` (stretched to the image size) over `image`.
pub fn overlay(image: &Image, grid: &Matrix) -> Image {
    let (h, w) = (image.height(), image.width());
    let max = grid.data().iter().cloned().fold(0.0, f64::max);
    let mut out = Image::new(h, w);
    for r in 0..h {
        for c in 0..w {
            let v = grid.get(r * grid.rows() / h, c * grid.cols() / w);
            let heat = if max > 0.0 { v / max } else { 0.0 };
            let mut px = [0u8; 3];
            for (ch, p) in px.iter_mut().enumerate() {
                let base = image.get(r, c, ch) * 255.0;
                let tint = [255.0 * heat, 64.0 * heat, 0.0][ch];
                *p = (0.5 * base + 0.5 * tint).round().clamp(0.0, 255.0) as u8;
            }
            out.put(r, c, px);
        }
    }
    out
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", image.width(), image.height())?;
    out.write_all(image.bytes())?;
    out.flush()?;
    Ok(())
}

/// Writes `expr_{i}.pfm` per grid, `concepts_layer_{l}.pfm` per layer and,
/// with `image`, `expr_{i}.ppm` overlays. Returns the written paths.
pub fn write_dump(dir: &Path, dump: &AttentionDump, image: Option<&Image>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (i, grid) in dump.grids.iter().enumerate() {
        let p = dir.join(format!("expr_{i}.pfm"));
        write_pfm(&p, grid)?;
        written.push(p);
        if let Some(img) = image {
            let p = dir.join(format!("expr_{i}.ppm"));
            write_ppm(&p, &overlay(img, grid))?;
            written.push(p);
        }
    }
    for (l, w) in dump.concept_weights.iter().enumerate() {
        let p = dir.join(format!("concepts_layer_{l}.pfm"));
        write_pfm(&p, w)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{generate_dataset, GenSettings};

    fn sample_model() -> (LatentVg, Image, Vec<usize>) {
        let cfg = ModelConfig {
            vocab_size: 32,
            m_max: 12,
            ..ModelConfig::tiny()
        };
        let settings = GenSettings {
            image_hw: cfg.image_h,
            ..GenSettings::default()
        };
        let (samples, _) = generate_dataset(1, 3, &settings).unwrap();
        let s = samples.into_iter().next().unwrap();
        (LatentVg::new(cfg).unwrap(), s.image, s.token_ids)
    }

    #[test]
    fn grids_are_distributions_per_expression() {
        let (model, image, tokens) = sample_model();
        let dump = attention_dump(&model, &image, &tokens).unwrap();
        let cfg = &model.config;
        assert_eq!(dump.grids.len(), cfg.n_latent() + 1);
        for g in &dump.grids {
            assert_eq!(g.shape(), (cfg.grid_h(), cfg.grid_w()));
            assert!(g.data().iter().all(|&v| v >= 0.0));
            assert!((g.data().iter().sum::<f64>() - 1.0).abs() < 1e-4);
        }
        assert_eq!(dump.concept_weights.len(), cfg.layers);
    }

    #[test]
    fn pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_fn(3, 5, |r, c| r as f64 * 0.25 - c as f64);
        let p = dir.path().join("m.pfm");
        write_pfm(&p, &m).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), m);
    }

    #[test]
    fn dump_writes_expected_files() {
        let (model, image, tokens) = sample_model();
        let dump = attention_dump(&model, &image, &tokens).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_dump(dir.path(), &dump, Some(&image)).unwrap();
        let n = dump.grids.len();
        assert_eq!(files.len(), 2 * n + model.config.layers);
        assert!(files.iter().all(|f| f.exists()));
    }
}
