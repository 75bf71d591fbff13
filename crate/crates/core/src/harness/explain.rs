//! Explanation bundles: per-concept attention heatmaps, concept
//! probabilities, gating and selector weights, and the diagnosis.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::array_to_rgb;
use crate::encoder::Image;
use crate::error::{CopaError, Result};
use crate::model::{CopaModel, Prediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptExplanation {
    pub index: usize,
    pub title: String,
    pub candidates: Vec<String>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
    pub confidence: f64,
    /// Gating weight of this concept in the diagnosis.
    pub alpha: f64,
    /// Selector weight per entry of `ExplanationBundle::depths`.
    pub selector_weights: Vec<f64>,
    /// CEG attention rows per depth in `depths`; entry 0 is the class token,
    /// the rest are patches in row-major grid order.
    pub attention: Vec<Vec<f64>>,
    /// Selector-weighted patch attention on the patch grid, normalized to
    /// sum 1.
    pub heatmap: Vec<Vec<f64>>,
    pub plot: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisRecord {
    pub predicted: usize,
    pub class: String,
    pub confidence: f64,
    pub classes: Vec<String>,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationBundle {
    pub grid: usize,
    pub image_size: usize,
    /// Trace depths the heatmaps mix.
    pub depths: Vec<usize>,
    pub concepts: Vec<ConceptExplanation>,
    pub diagnosis: DiagnosisRecord,
}

/// Selector-weighted patch attention per concept, each `grid × grid` and
/// summing to 1.
pub fn concept_heatmaps(model: &CopaModel, prediction: &Prediction) -> Vec<Array2<f64>> {
    let grid = model.config.backbone.grid();
    (0..model.n_concepts())
        .map(|i| {
            let mut heat = Array2::zeros((grid, grid));
            for (k, &depth) in prediction.selector_depths.iter().enumerate() {
                let w = prediction.selector_weights[[i, k]];
                let row = prediction.ceg_attention[depth].row(i);
                for p in 0..grid * grid {
                    heat[[p / grid, p % grid]] += w * row[p + 1];
                }
            }
            let total = heat.sum();
            if total > 0.0 {
                heat /= total;
            }
            heat
        })
        .collect()
}

pub fn explain(model: &CopaModel, image: &Image) -> Result<ExplanationBundle> {
    let prediction = model.predict(image)?;
    Ok(bundle(model, &prediction))
}

pub fn bundle(model: &CopaModel, prediction: &Prediction) -> ExplanationBundle {
    let heatmaps = concept_heatmaps(model, prediction);
    let concepts = model
        .schema
        .concepts
        .iter()
        .enumerate()
        .map(|(i, c)| ConceptExplanation {
            index: i,
            title: c.title.clone(),
            candidates: c.candidates.clone(),
            probabilities: prediction.scores[i].probabilities.to_vec(),
            predicted: prediction.concepts[i].index,
            confidence: prediction.concepts[i].confidence,
            alpha: prediction.diagnosis.alpha[i],
            selector_weights: prediction.selector_weights.row(i).to_vec(),
            attention: prediction
                .selector_depths
                .iter()
                .map(|&d| prediction.ceg_attention[d].row(i).to_vec())
                .collect(),
            heatmap: heatmaps[i].rows().into_iter().map(|r| r.to_vec()).collect(),
            plot: None,
        })
        .collect();
    let d = &prediction.diagnosis;
    ExplanationBundle {
        grid: model.config.backbone.grid(),
        image_size: model.config.backbone.image_size,
        depths: prediction.selector_depths.clone(),
        concepts,
        diagnosis: DiagnosisRecord {
            predicted: d.predicted,
            class: model.schema.disease_classes[d.predicted].clone(),
            confidence: d.confidence(),
            classes: model.schema.disease_classes.clone(),
            probabilities: d.probabilities.to_vec(),
        },
    }
}

/// Writes `explanation.json` and one overlay PNG per concept into `out`.
pub fn export_explanation(model: &CopaModel, image: &Image, out: &Path) -> Result<ExplanationBundle> {
    let mut b = explain(model, image)?;
    std::fs::create_dir_all(out).map_err(|e| CopaError::io(out, e))?;
    for c in &mut b.concepts {
        let grid = Array2::from_shape_fn((b.grid, b.grid), |(y, x)| c.heatmap[y][x]);
        let name = format!("concept_{}_{}.png", c.index, slug(&c.title));
        overlay(image, &grid).save(out.join(&name))?;
        c.plot = Some(name);
    }
    let path = out.join("explanation.json");
    let json = serde_json::to_string_pretty(&b).map_err(|e| CopaError::invalid("explanation", e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| CopaError::io(&path, e))?;
    Ok(b)
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Bilinear upsampling of a patch grid to `size × size`.
pub fn upsample(grid: &Array2<f64>, size: usize) -> Array2<f64> {
    let (h, w) = grid.dim();
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([grid[[y as usize, x as usize]] as f32]));
    let up = imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
    Array2::from_shape_fn((size, size), |(y, x)| up.get_pixel(x as u32, y as u32)[0] as f64)
}

/// Heat mass inside and outside a pixel box `[x0, y0, x1, y1)` of an
/// upsampled map.
pub fn mass_split(heat: &Array2<f64>, bbox: [usize; 4]) -> (f64, f64) {
    let [x0, y0, x1, y1] = bbox;
    let mut inside = 0.0;
    let mut outside = 0.0;
    for ((y, x), &v) in heat.indexed_iter() {
        if x >= x0 && x < x1 && y >= y0 && y < y1 {
            inside += v;
        } else {
            outside += v;
        }
    }
    (inside, outside)
}

/// Blue-to-red ramp.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Heatmap upsampled to the image, max-normalized, colour-mapped and blended
/// half and half with the image, then enlarged 8× for viewing.
pub fn overlay(image: &Image, grid: &Array2<f64>) -> RgbImage {
    let (h, w, _) = image.dim();
    let heat = upsample(grid, h.max(w));
    let max = heat.iter().copied().fold(0.0, f64::max);
    let base = array_to_rgb(image);
    let blended = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = if max > 0.0 { heat[[y as usize, x as usize]] / max } else { 0.0 };
        let c = colormap(v);
        let p = base.get_pixel(x, y);
        Rgb([0, 1, 2].map(|k| ((p[k] as u16 + c[k] as u16) / 2) as u8))
    });
    imageops::resize(&blended, w as u32 * 8, h as u32 * 8, FilterType::Nearest)
}
