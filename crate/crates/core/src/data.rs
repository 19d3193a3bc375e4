//! Procedural referring scenes: colored shapes in fixed cells, described by
//! short template expressions that single out one object (or none).

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::predictor::box_from_mask;
use crate::rng::{self, Rng};
use crate::sample::{BoundingBox, Image, Mask, SceneSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Orange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Size {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cell {
    Left,
    Right,
    Top,
    Bottom,
    Center,
}

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
pub const COLORS: [Color; 8] = [
    Color::Red,
    Color::Green,
    Color::Blue,
    Color::Yellow,
    Color::Cyan,
    Color::Magenta,
    Color::White,
    Color::Orange,
];
pub const SIZES: [Size; 2] = [Size::Small, Size::Large];
pub const CELLS: [Cell; 5] = [Cell::Left, Cell::Right, Cell::Top, Cell::Bottom, Cell::Center];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Orange => "orange",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 30, 30],
            Color::Green => [30, 200, 40],
            Color::Blue => [40, 60, 230],
            Color::Yellow => [235, 225, 40],
            Color::Cyan => [40, 220, 220],
            Color::Magenta => [210, 40, 210],
            Color::White => [245, 245, 245],
            Color::Orange => [245, 140, 20],
        }
    }
}

impl Size {
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Radius (half side) in pixels for a 64-pixel canvas.
    fn radius64(self) -> f64 {
        match self {
            Size::Small => 5.0,
            Size::Large => 9.0,
        }
    }
}

impl Cell {
    pub fn word(self) -> &'static str {
        match self {
            Cell::Left => "left",
            Cell::Right => "right",
            Cell::Top => "top",
            Cell::Bottom => "bottom",
            Cell::Center => "center",
        }
    }

    fn phrase(self) -> [&'static str; 3] {
        match self {
            Cell::Left => ["on", "the", "left"],
            Cell::Right => ["on", "the", "right"],
            Cell::Top => ["at", "the", "top"],
            Cell::Bottom => ["at", "the", "bottom"],
            Cell::Center => ["in", "the", "center"],
        }
    }

    /// Center `(row, col)` on a 64-pixel canvas.
    fn center64(self) -> (f64, f64) {
        match self {
            Cell::Left => (32.0, 12.0),
            Cell::Right => (32.0, 52.0),
            Cell::Top => (12.0, 32.0),
            Cell::Bottom => (52.0, 32.0),
            Cell::Center => (32.0, 32.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub cell: Cell,
}

/// Attribute constraints carried by an expression. `None` means unstated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Query {
    pub shape: Option<Shape>,
    pub color: Option<Color>,
    pub size: Option<Size>,
    pub cell: Option<Cell>,
}

impl Query {
    pub fn matches(&self, o: &SceneObject) -> bool {
        self.shape.is_none_or(|s| s == o.shape)
            && self.color.is_none_or(|c| c == o.color)
            && self.size.is_none_or(|s| s == o.size)
            && self.cell.is_none_or(|c| c == o.cell)
    }

    /// `the [size] [color] noun [position phrase]`.
    pub fn to_expression(&self) -> String {
        let mut words = vec!["the"];
        if let Some(s) = self.size {
            words.push(s.word());
        }
        if let Some(c) = self.color {
            words.push(c.word());
        }
        words.push(self.shape.map_or("object", Shape::word));
        if let Some(c) = self.cell {
            words.extend(c.phrase());
        }
        words.join(" ")
    }

    /// Inverse of [`Query::to_expression`].
    pub fn parse(expression: &str) -> Result<Self> {
        let mut q = Query::default();
        for w in expression.split_whitespace() {
            if let Some(&s) = SHAPES.iter().find(|s| s.word() == w) {
                q.shape = Some(s);
            } else if let Some(&c) = COLORS.iter().find(|c| c.word() == w) {
                q.color = Some(c);
            } else if let Some(&s) = SIZES.iter().find(|s| s.word() == w) {
                q.size = Some(s);
            } else if let Some(&c) = CELLS.iter().find(|c| c.word() == w) {
                q.cell = Some(c);
            } else if !matches!(w, "the" | "on" | "at" | "in" | "object") {
                return Err(Error::format("expression", format!("unknown word {w:?}")));
            }
        }
        Ok(q)
    }
}

/// A scene layout with its referring expression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    /// Index of the referred object; `None` for a no-target expression.
    pub target: Option<usize>,
    pub expression: String,
}

impl SceneSpec {
    /// Objects matched by the expression.
    pub fn referents(&self) -> Result<Vec<usize>> {
        let q = Query::parse(&self.expression)?;
        Ok((0..self.objects.len()).filter(|&i| q.matches(&self.objects[i])).collect())
    }
}

/// Rasterizes objects with hard edges on a `hw × hw` canvas. Returns the
/// image and one mask per object.
pub fn render(objects: &[SceneObject], hw: usize) -> (Image, Vec<Mask>) {
    let scale = hw as f64 / 64.0;
    let mut image = Image::new(hw, hw);
    for r in 0..hw {
        for c in 0..hw {
            image.put(r, c, [18, 18, 24]);
        }
    }
    let masks: Vec<Mask> = objects
        .iter()
        .map(|o| {
            let (cy, cx) = o.cell.center64();
            let (cy, cx) = (cy * scale, cx * scale);
            let rad = o.size.radius64() * scale;
            Mask::from_fn(hw, hw, |r, c| {
                let y = r as f64 + 0.5 - cy;
                let x = c as f64 + 0.5 - cx;
                match o.shape {
                    Shape::Circle => x * x + y * y <= rad * rad,
                    Shape::Square => x.abs() <= rad && y.abs() <= rad,
                    Shape::Triangle => y.abs() <= rad && x.abs() <= (y + rad) / 2.0,
                }
            })
        })
        .collect();
    for (o, m) in objects.iter().zip(&masks) {
        for r in 0..hw {
            for c in 0..hw {
                if m.get(r, c) {
                    image.put(r, c, o.color.rgb());
                }
            }
        }
    }
    (image, masks)
}

/// Generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GenSettings {
    pub image_hw: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub no_target_fraction: f64,
    /// Scene redraws allowed before giving up on a unique description.
    pub max_retries: usize,
}

impl Default for GenSettings {
    fn default() -> Self {
        Self {
            image_hw: 64,
            min_objects: 2,
            max_objects: 5,
            no_target_fraction: 0.0,
            max_retries: 100,
        }
    }
}

fn random_objects(rng: &mut Rng, s: &GenSettings) -> Vec<SceneObject> {
    let n = rng.random_range(s.min_objects..=s.max_objects);
    let mut cells = CELLS.to_vec();
    cells.shuffle(rng);
    cells[..n]
        .iter()
        .map(|&cell| SceneObject {
            shape: *SHAPES.choose(rng).expect("shapes"),
            color: *COLORS.choose(rng).expect("colors"),
            size: *SIZES.choose(rng).expect("sizes"),
            cell,
        })
        .collect()
}

/// Every description of `o` naming a noun (its shape or "object") plus one or
/// two of color, size and position.
fn candidate_queries(o: &SceneObject) -> Vec<Query> {
    let mut out = Vec::new();
    for shape in [Some(o.shape), None] {
        for mask in 1u8..8 {
            if mask.count_ones() > 2 {
                continue;
            }
            out.push(Query {
                shape,
                color: (mask & 1 != 0).then_some(o.color),
                size: (mask & 2 != 0).then_some(o.size),
                cell: (mask & 4 != 0).then_some(o.cell),
            });
        }
    }
    out
}

/// Draws one scene and its expression. Fails with `InfeasibleSpec` when no
/// unique description turns up within the retry budget.
pub fn generate_scene(rng: &mut Rng, s: &GenSettings, no_target: bool) -> Result<SceneSpec> {
    if s.min_objects < 1 || s.max_objects > CELLS.len() || s.min_objects > s.max_objects {
        return Err(Error::InfeasibleSpec(format!(
            "{}..={} objects do not fit {} cells",
            s.min_objects,
            s.max_objects,
            CELLS.len()
        )));
    }
    for _ in 0..s.max_retries.max(1) {
        let objects = random_objects(rng, s);
        if no_target {
            let absent: Vec<Color> = COLORS
                .iter()
                .copied()
                .filter(|c| objects.iter().all(|o| o.color != *c))
                .collect();
            let Some(&color) = absent.choose(rng) else { continue };
            let like = objects.choose(rng).expect("non-empty scene");
            let mut q = Query {
                color: Some(color),
                ..Query::default()
            };
            if rng.random_bool(0.5) {
                q.shape = Some(like.shape);
            }
            match rng.random_range(0..3) {
                0 => q.size = Some(like.size),
                1 => q.cell = Some(like.cell),
                _ => {}
            }
            return Ok(SceneSpec {
                objects,
                target: None,
                expression: q.to_expression(),
            });
        }
        let target = rng.random_range(0..objects.len());
        let unique: Vec<Query> = candidate_queries(&objects[target])
            .into_iter()
            .filter(|q| objects.iter().filter(|o| q.matches(o)).count() == 1)
            .collect();
        if let Some(q) = unique.choose(rng) {
            return Ok(SceneSpec {
                objects,
                target: Some(target),
                expression: q.to_expression(),
            });
        }
    }
    Err(Error::InfeasibleSpec(format!(
        "no unique description after {} scenes",
        s.max_retries
    )))
}

/// Fixed word-level vocabulary; id 0 is the unknown word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

pub const UNKNOWN_WORD: &str = "<unk>";

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    /// Every word the generator can emit.
    pub fn standard() -> Self {
        let mut words: Vec<String> = [UNKNOWN_WORD, "the", "on", "at", "in", "object"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        words.extend(SHAPES.iter().map(|s| s.word().to_string()));
        words.extend(COLORS.iter().map(|c| c.word().to_string()));
        words.extend(SIZES.iter().map(|s| s.word().to_string()));
        words.extend(CELLS.iter().map(|c| c.word().to_string()));
        Self::from_words(words).expect("standard words are unique")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Whitespace tokenization; unknown words map to id 0.
    pub fn encode(&self, expression: &str) -> Vec<usize> {
        expression
            .split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(0))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i).map_or(UNKNOWN_WORD, String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.words.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        Self::from_words(text.lines().map(str::to_string).collect())
    }
}

/// Builds the sample for a scene.
pub fn to_sample(id: usize, spec: &SceneSpec, vocab: &Vocab, hw: usize) -> SceneSample {
    let (image, masks) = render(&spec.objects, hw);
    let gt_mask = match spec.target {
        Some(t) => masks[t].clone(),
        None => Mask::new(hw, hw),
    };
    SceneSample {
        id,
        image,
        token_ids: vocab.encode(&spec.expression),
        expression: spec.expression.clone(),
        gt_box: box_from_mask(&gt_mask),
        gt_mask,
        no_target: spec.target.is_none(),
    }
}

/// `count` scenes; scene `i` depends only on `(seed, i)`.
pub fn generate_split(count: usize, seed: u64, settings: &GenSettings) -> Result<Vec<SceneSpec>> {
    (0..count)
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            let no_target = rng::uniform(&mut rng) < settings.no_target_fraction;
            generate_scene(&mut rng, settings, no_target)
        })
        .collect()
}

/// Seed of a named split; distinct splits never share scene seeds.
pub fn split_seed(seed: u64, split: &str) -> u64 {
    let id = match split {
        "train" => 1,
        "val" => 2,
        "test" => 3,
        other => other.bytes().fold(1000u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b))),
    };
    rng::derive_seed(seed, id)
}

/// Generates samples for a split together with the standard vocabulary.
pub fn generate_dataset(count: usize, seed: u64, settings: &GenSettings) -> Result<(Vec<SceneSample>, Vocab)> {
    if count == 0 {
        return Err(Error::InfeasibleSpec("sample count must be at least 1".into()));
    }
    let vocab = Vocab::standard();
    let specs = generate_split(count, seed, settings)?;
    let samples = specs
        .iter()
        .enumerate()
        .map(|(i, s)| to_sample(i, s, &vocab, settings.image_hw))
        .collect();
    Ok((samples, vocab))
}

#[derive(Serialize, Deserialize)]
struct Annotation {
    id: usize,
    expression: String,
    tokens: Vec<usize>,
    mask_rle: Vec<u32>,
    bbox: Option<[usize; 4]>,
    no_target: bool,
}

const IMAGE_MAGIC: &str = "LVGIMG";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const IMAGES_FILE: &str = "images.raw";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

/// Writes one split directory: raw images behind a header line and one JSON
/// annotation per line.
pub fn write_split(dir: &Path, samples: &[SceneSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w) = samples
        .first()
        .map_or((0, 0), |s| (s.image.height(), s.image.width()));
    let mut images = std::io::BufWriter::new(fs::File::create(dir.join(IMAGES_FILE))?);
    writeln!(images, "{IMAGE_MAGIC} {} {h} {w} 3", samples.len())?;
    let mut ann = std::io::BufWriter::new(fs::File::create(dir.join(ANNOTATIONS_FILE))?);
    for s in samples {
        if (s.image.height(), s.image.width()) != (h, w) {
            return Err(Error::ShapeMismatch("images in a split must share one size".into()));
        }
        images.write_all(s.image.bytes())?;
        let a = Annotation {
            id: s.id,
            expression: s.expression.clone(),
            tokens: s.token_ids.clone(),
            mask_rle: s.gt_mask.to_rle(),
            bbox: s.gt_box.map(BoundingBox::to_array),
            no_target: s.no_target,
        };
        serde_json::to_writer(&mut ann, &a)?;
        ann.write_all(b"\n")?;
    }
    images.flush()?;
    ann.flush()?;
    Ok(())
}

/// Reads a split written by [`write_split`].
pub fn read_split(dir: &Path) -> Result<Vec<SceneSample>> {
    let img_path = dir.join(IMAGES_FILE);
    let ann_path = dir.join(ANNOTATIONS_FILE);
    for p in [&img_path, &ann_path] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
    }
    let mut reader = BufReader::new(fs::File::open(&img_path)?);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let bad = || Error::format("image file", format!("bad header {:?}", header.trim()));
    if fields.len() != 5 || fields[0] != IMAGE_MAGIC || fields[4] != "3" {
        return Err(bad());
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad());
    let (count, h, w) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);

    let ann_reader = BufReader::new(fs::File::open(&ann_path)?);
    let mut samples = Vec::with_capacity(count);
    for line in ann_reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = serde_json::from_str(&line)?;
        let mut bytes = vec![0u8; h * w * 3];
        reader
            .read_exact(&mut bytes)
            .map_err(|_| Error::format("image file", "fewer images than annotations"))?;
        let gt_mask = Mask::from_rle(h, w, &a.mask_rle)?;
        let sample = SceneSample {
            id: a.id,
            image: Image::from_bytes(h, w, bytes)?,
            token_ids: a.tokens,
            expression: a.expression,
            gt_box: a.bbox.map(|b| BoundingBox {
                x_min: b[0],
                y_min: b[1],
                x_max: b[2],
                y_max: b[3],
            }),
            gt_mask,
            no_target: a.no_target,
        };
        sample.check()?;
        samples.push(sample);
    }
    if samples.len() != count {
        return Err(Error::format(
            "dataset",
            format!("header promises {count} images, found {} annotations", samples.len()),
        ));
    }
    Ok(samples)
}

/// SHA-256 over the vocabulary and every split's files, in sorted path order.
pub fn dataset_hash(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        hasher.update(rel.as_bytes());
        hasher.update([0]);
        hasher.update(fs::read(root.join(&rel))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    if !dir.exists() {
        return Err(Error::MissingArtifact(dir.to_path_buf()));
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name == VOCAB_FILE || name == IMAGES_FILE || name == ANNOTATIONS_FILE {
                let rel = path.strip_prefix(root).expect("under root");
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
    }
    Ok(())
}

/// A split loaded from disk with its vocabulary.
pub struct Dataset {
    pub vocab: Vocab,
    pub samples: Vec<SceneSample>,
}

pub fn load_dataset(root: &Path, split: &str) -> Result<Dataset> {
    Ok(Dataset {
        vocab: Vocab::load(&root.join(VOCAB_FILE))?,
        samples: read_split(&root.join(split))?,
    })
}
