//! Labelled image datasets: a synthetic shape/color/texture generator, a
//! delimiter-separated manifest loader for user-supplied images, and
//! stratified splitting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::Image;
use crate::error::{CopaError, Result};
use crate::schema::{ConceptDef, ConceptSchema};

/// One `(image, concepts, disease)` triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    /// Candidate index per concept, schema order.
    pub concept_labels: Vec<usize>,
    pub disease_label: usize,
    /// Pixel bounding box `[x0, y0, x1, y1)` of the rendered shape, synthetic
    /// samples only.
    pub bbox: Option<[usize; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: ConceptSchema,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Hash over sample ids and labels.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.id.as_bytes());
            for c in &s.concept_labels {
                h.update((*c as u64).to_le_bytes());
            }
            h.update((s.disease_label as u64).to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.schema.n_classes()];
        for s in &self.samples {
            counts[s.disease_label] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Striped,
    Solid,
    Checkered,
}

impl TextureKind {
    fn name(self) -> &'static str {
        match self {
            TextureKind::Striped => "striped",
            TextureKind::Solid => "solid",
            TextureKind::Checkered => "checkered",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorSpec {
    pub name: String,
    pub rgb: [f64; 3],
}

/// A concept value required by a [`LabelRule`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub concept: String,
    pub candidate: String,
}

/// Conjunction over concept values: samples satisfying every condition get
/// `positive_class`, all others `negative_class`. Total over the concept
/// product space by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRule {
    pub positive_class: String,
    pub negative_class: String,
    pub all_of: Vec<Condition>,
}

impl Default for LabelRule {
    fn default() -> Self {
        Self {
            positive_class: "malignant".into(),
            negative_class: "benign".into(),
            all_of: vec![
                Condition {
                    concept: "Color".into(),
                    candidate: "red".into(),
                },
                Condition {
                    concept: "Texture".into(),
                    candidate: "striped".into(),
                },
            ],
        }
    }
}

/// Compiled rule: `(concept index, candidate index)` pairs plus class ids.
#[derive(Debug, Clone)]
pub struct CompiledRule {
    pub conditions: Vec<(usize, usize)>,
    pub positive: usize,
    pub negative: usize,
}

impl CompiledRule {
    pub fn label(&self, concepts: &[usize]) -> usize {
        if self.conditions.iter().all(|&(i, j)| concepts[i] == j) {
            self.positive
        } else {
            self.negative
        }
    }
}

impl LabelRule {
    pub fn compile(&self, schema: &ConceptSchema) -> Result<CompiledRule> {
        let class = |name: &str, field: &str| {
            schema
                .class_index(name)
                .ok_or_else(|| CopaError::invalid(field, format!("unknown class {name:?}")))
        };
        let positive = class(&self.positive_class, "rule.positive_class")?;
        let negative = class(&self.negative_class, "rule.negative_class")?;
        let conditions = self
            .all_of
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let i = schema.concept_index(&c.concept).ok_or_else(|| {
                    CopaError::invalid(format!("rule.all_of[{k}].concept"), format!("unknown concept {:?}", c.concept))
                })?;
                let j = schema.concepts[i].candidate_index(&c.candidate).ok_or_else(|| {
                    CopaError::invalid(
                        format!("rule.all_of[{k}].candidate"),
                        format!("unknown candidate {:?}", c.candidate),
                    )
                })?;
                Ok((i, j))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CompiledRule {
            conditions,
            positive,
            negative,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub count: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
    pub background: [f64; 3],
    pub colors: Vec<ColorSpec>,
    pub shapes: Vec<ShapeKind>,
    pub textures: Vec<TextureKind>,
    /// Stripe/check period in pixels.
    pub stripe_period: usize,
    /// Shape half-extent range as a fraction of the image side. Every shape
    /// spans the same bounding box for a given half-extent.
    pub size_range: [f64; 2],
    pub rule: LabelRule,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            count: 2000,
            noise: 0.05,
            seed: 7,
            background: [0.5, 0.5, 0.5],
            colors: vec![
                ColorSpec {
                    name: "red".into(),
                    rgb: [0.9, 0.1, 0.1],
                },
                ColorSpec {
                    name: "green".into(),
                    rgb: [0.1, 0.8, 0.1],
                },
                ColorSpec {
                    name: "blue".into(),
                    rgb: [0.1, 0.2, 0.9],
                },
            ],
            shapes: vec![ShapeKind::Circle, ShapeKind::Square],
            textures: vec![TextureKind::Striped, TextureKind::Solid],
            stripe_period: 4,
            size_range: [0.28, 0.31],
            rule: LabelRule::default(),
        }
    }
}

impl SyntheticConfig {
    /// Concept vocabulary implied by the enumerations, in the order
    /// color, shape, texture.
    pub fn schema(&self) -> ConceptSchema {
        let mut base = ConceptSchema::synthetic();
        base.concepts = vec![
            ConceptDef {
                title: "Color".into(),
                candidates: self.colors.iter().map(|c| c.name.clone()).collect(),
            },
            ConceptDef {
                title: "Shape".into(),
                candidates: self.shapes.iter().map(|s| s.name().to_string()).collect(),
            },
            ConceptDef {
                title: "Texture".into(),
                candidates: self.textures.iter().map(|t| t.name().to_string()).collect(),
            },
        ];
        base.disease_classes = vec![self.rule.negative_class.clone(), self.rule.positive_class.clone()];
        base
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(CopaError::invalid("synthetic.image_size", "must be at least 8"));
        }
        if !(self.noise >= 0.0) {
            return Err(CopaError::invalid("synthetic.noise", "must be non-negative"));
        }
        let [lo, hi] = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return Err(CopaError::invalid("synthetic.size_range", "must satisfy 0 < lo <= hi < 0.5"));
        }
        if self.stripe_period < 2 {
            return Err(CopaError::invalid("synthetic.stripe_period", "must be at least 2"));
        }
        self.schema().validate()?;
        self.rule.compile(&self.schema())?;
        Ok(())
    }
}

/// Renders `config.count` samples. Each sample draws its own stream from
/// `(seed, index)`, so the output is independent of thread scheduling.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let schema = config.schema();
    let rule = config.rule.compile(&schema)?;
    let samples = (0..config.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64 + 1);
            let labels = vec![
                rng.random_range(0..config.colors.len()),
                rng.random_range(0..config.shapes.len()),
                rng.random_range(0..config.textures.len()),
            ];
            let (image, bbox) = render(config, &labels, &mut rng);
            Sample {
                id: format!("syn-{}-{i:05}", config.seed),
                image,
                disease_label: rule.label(&labels),
                concept_labels: labels,
                bbox: Some(bbox),
            }
        })
        .collect();
    Ok(Dataset { schema, samples })
}

fn render(config: &SyntheticConfig, labels: &[usize], rng: &mut ChaCha8Rng) -> (Image, [usize; 4]) {
    let s = config.image_size as f64;
    let color = config.colors[labels[0]].rgb;
    let shape = config.shapes[labels[1]];
    let texture = config.textures[labels[2]];
    let [lo, hi] = config.size_range;
    let radius = s * if lo < hi { rng.random_range(lo..hi) } else { lo };
    let margin = radius + 1.0;
    let cx = rng.random_range(margin..s - margin);
    let cy = rng.random_range(margin..s - margin);
    let period = config.stripe_period;
    let phase = rng.random_range(0..period);
    let dark = color.map(|c| c * 0.3);

    let n = config.image_size;
    let mut img = Array3::zeros((n, n, 3));
    let (mut x0, mut y0, mut x1, mut y1) = (n, n, 0, 0);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (px - cx, py - cy);
            let inside = match shape {
                ShapeKind::Circle => dx * dx + dy * dy <= radius * radius,
                ShapeKind::Square => dx.abs() <= radius && dy.abs() <= radius,
                ShapeKind::Triangle => {
                    let t = (py - (cy - radius)) / (2.0 * radius);
                    (0.0..=1.0).contains(&t) && dx.abs() <= t * radius
                }
            };
            let rgb = if inside {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
                let on = match texture {
                    TextureKind::Solid => true,
                    TextureKind::Striped => ((y + phase) / (period / 2)) % 2 == 0,
                    TextureKind::Checkered => (((y + phase) / (period / 2)) + ((x + phase) / (period / 2))) % 2 == 0,
                };
                if on {
                    color
                } else {
                    dark
                }
            } else {
                config.background
            };
            for c in 0..3 {
                img[[y, x, c]] = rgb[c];
            }
        }
    }
    if config.noise > 0.0 {
        let normal = Normal::new(0.0, config.noise).expect("valid noise");
        img.mapv_inplace(|v: f64| (v + normal.sample(rng)).clamp(0.0, 1.0));
    }
    (img, [x0, y0, x1, y1])
}

/// Disjoint train/val/test index lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.15, 0.15];

/// Stratified (by disease label) random split. Within each class, the first
/// `round(r_train·n)` shuffled indices go to train, the next
/// `round(r_val·n)` to validation and the remainder to test.
pub fn split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CopaError::invalid("split.ratios", format!("{ratios:?} must be in [0,1] and sum to 1")));
    }
    let fp = dataset.fingerprint();
    let mix = u64::from_le_bytes(fp[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ mix);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class.entry(s.disease_label).or_default().push(i);
    }
    let mut out = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = ((ratios[0] * n).round() as usize).min(idx.len());
        let n_val = ((ratios[1] * n).round() as usize).min(idx.len() - n_train);
        out.train.extend_from_slice(&idx[..n_train]);
        out.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        out.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Loads an RGB image file, resizes it bilinearly to `size × size` and
/// scales to `[0, 1]`.
pub fn load_image(path: &Path, size: usize) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    Ok(rgb_to_array(&img, size))
}

/// Decodes encoded image bytes (PNG/JPEG) the same way as [`load_image`].
pub fn decode_image(bytes: &[u8], size: usize) -> Result<Image> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    Ok(rgb_to_array(&img, size))
}

fn rgb_to_array(img: &RgbImage, size: usize) -> Image {
    let resized;
    let img = if img.width() as usize != size || img.height() as usize != size {
        resized = image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
        &resized
    } else {
        img
    };
    Array3::from_shape_fn((size, size, 3), |(y, x, c)| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
}

pub fn array_to_rgb(image: &Image) -> RgbImage {
    let (h, w, _) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub const IMAGE_COLUMN: &str = "image_path";
pub const DISEASE_COLUMN: &str = "disease";

/// Reads a manifest: a header naming `image_path`, every concept title and
/// `disease`, then one row per sample. Concept and disease cells hold either
/// a phrase from the schema or a zero-based index. Relative image paths
/// resolve against the manifest's directory. Row numbers in errors count
/// data rows from 1.
pub fn load_manifest(path: &Path, schema: &ConceptSchema, image_size: usize) -> Result<Dataset> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let delimiter = if path.extension().is_some_and(|e| e == "tsv") { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CopaError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| CopaError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CopaError::Manifest {
                row: 0,
                message: format!("header lacks column {name:?}"),
            })
    };
    let image_col = col(IMAGE_COLUMN)?;
    let disease_col = col(DISEASE_COLUMN)?;
    let concept_cols = schema
        .concepts
        .iter()
        .map(|c| col(&c.title))
        .collect::<Result<Vec<_>>>()?;

    let mut samples = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| CopaError::Manifest {
            row,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(CopaError::Manifest {
                row,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let mut concept_labels = Vec::with_capacity(concept_cols.len());
        for (i, &c) in concept_cols.iter().enumerate() {
            let cell = record[c].trim();
            let def = &schema.concepts[i];
            let idx = resolve(cell, &def.candidates).ok_or_else(|| CopaError::Manifest {
                row,
                message: format!("unknown phrase {cell:?} for concept {:?}", def.title),
            })?;
            concept_labels.push(idx);
        }
        let cell = record[disease_col].trim();
        let disease_label = resolve(cell, &schema.disease_classes).ok_or_else(|| CopaError::Manifest {
            row,
            message: format!("unknown disease class {cell:?}"),
        })?;
        let rel = PathBuf::from(record[image_col].trim());
        let full = if rel.is_absolute() { rel.clone() } else { base.join(&rel) };
        if !full.is_file() {
            return Err(CopaError::Manifest {
                row,
                message: format!("missing image file {}", full.display()),
            });
        }
        let image = load_image(&full, image_size).map_err(|e| CopaError::Manifest {
            row,
            message: format!("{}: {e}", full.display()),
        })?;
        samples.push(Sample {
            id: rel.display().to_string(),
            image,
            concept_labels,
            disease_label,
            bbox: None,
        });
    }
    Ok(Dataset {
        schema: schema.clone(),
        samples,
    })
}

fn resolve(cell: &str, options: &[String]) -> Option<usize> {
    options
        .iter()
        .position(|o| o == cell)
        .or_else(|| cell.parse::<usize>().ok().filter(|&i| i < options.len()))
}

/// Writes PNG images, `manifest.csv` (phrases) and `schema.toml` into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| CopaError::io(&images, e))?;
    let schema_path = dir.join("schema.toml");
    std::fs::write(&schema_path, dataset.schema.to_toml()).map_err(|e| CopaError::io(&schema_path, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| CopaError::Parse {
        path: manifest.display().to_string(),
        message: e.to_string(),
    })?;
    let mut header = vec![IMAGE_COLUMN.to_string()];
    header.extend(dataset.schema.concepts.iter().map(|c| c.title.clone()));
    header.push(DISEASE_COLUMN.to_string());
    let csv_err = |e: csv::Error| CopaError::Parse {
        path: manifest.display().to_string(),
        message: e.to_string(),
    };
    w.write_record(&header).map_err(csv_err)?;
    for s in &dataset.samples {
        let rel = format!("images/{}.png", s.id);
        let file = dir.join(&rel);
        array_to_rgb(&s.image).save(&file)?;
        let mut row = vec![rel];
        for (i, &l) in s.concept_labels.iter().enumerate() {
            row.push(dataset.schema.concepts[i].candidates[l].clone());
        }
        row.push(dataset.schema.disease_classes[s.disease_label].clone());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CopaError::io(&manifest, e))?;
    Ok(manifest)
}
