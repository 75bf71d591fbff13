use rayon::prelude::*;

use crate::data::Sample;
use crate::error::Result;
use crate::harness::metrics::MetricsReport;
use crate::model::{CopaModel, Prediction};

/// Predictions for every sample, in input order.
pub fn predict_all(model: &CopaModel, samples: &[Sample]) -> Result<Vec<Prediction>> {
    samples.par_iter().map(|s| model.predict(&s.image)).collect()
}

pub fn evaluate(model: &CopaModel, samples: &[Sample]) -> Result<MetricsReport> {
    let predictions = predict_all(model, samples)?;
    report_from_predictions(model, samples, &predictions)
}

pub fn report_from_predictions(model: &CopaModel, samples: &[Sample], predictions: &[Prediction]) -> Result<MetricsReport> {
    let disease_probs: Vec<Vec<f64>> = predictions.iter().map(|p| p.diagnosis.probabilities.to_vec()).collect();
    let disease_labels: Vec<usize> = samples.iter().map(|s| s.disease_label).collect();
    let titles: Vec<String> = model.schema.concepts.iter().map(|c| c.title.clone()).collect();
    let concept_probs: Vec<Vec<Vec<f64>>> = (0..titles.len())
        .map(|i| predictions.iter().map(|p| p.scores[i].probabilities.to_vec()).collect())
        .collect();
    let concept_labels: Vec<Vec<usize>> = samples.iter().map(|s| s.concept_labels.clone()).collect();
    MetricsReport::compute(
        &disease_probs,
        &disease_labels,
        model.schema.n_classes(),
        &titles,
        &concept_probs,
        &concept_labels,
    )
}
