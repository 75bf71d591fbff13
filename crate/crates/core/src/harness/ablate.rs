//! Component ablation grid and multi-seed summaries.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::harness::evaluate::evaluate;
use crate::harness::metrics::{mean_std, MetricsReport};
use crate::harness::train::train;
use crate::model::AblationFlags;

/// The six `(MLA, CPT, FVB)` rows, from the plain baseline to the full model.
pub const ABLATION_GRID: [AblationFlags; 6] = [
    AblationFlags {
        mla: false,
        cpt: false,
        fvb: false,
    },
    AblationFlags {
        mla: true,
        cpt: false,
        fvb: false,
    },
    AblationFlags {
        mla: false,
        cpt: true,
        fvb: false,
    },
    AblationFlags {
        mla: false,
        cpt: true,
        fvb: true,
    },
    AblationFlags {
        mla: true,
        cpt: true,
        fvb: false,
    },
    AblationFlags {
        mla: true,
        cpt: true,
        fvb: true,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: AblationFlags,
    pub label_acc: f64,
    pub label_f1: f64,
    pub concept_acc: f64,
    pub concept_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "MLA CPT FVB | label ACC  F1    | concept ACC  F1")?;
        for r in &self.rows {
            let m = |b: bool| if b { " x " } else { " . " };
            writeln!(
                f,
                "{} {} {} |     {:.3}  {:.3} |       {:.3}  {:.3}",
                m(r.flags.mla),
                m(r.flags.cpt),
                m(r.flags.fvb),
                r.label_acc,
                r.label_f1,
                r.concept_acc,
                r.concept_f1
            )?;
        }
        Ok(())
    }
}

/// Trains and tests one model per row of [`ABLATION_GRID`].
pub fn ablate(base: &TrainConfig, dataset: &Dataset, split: &Split) -> Result<AblationTable> {
    let test = dataset.subset(&split.test);
    let rows = ABLATION_GRID
        .iter()
        .map(|&flags| {
            let mut cfg = base.clone();
            cfg.model.flags = flags;
            log::info!("ablation row {}", flags.label());
            let out = train(&cfg, dataset, split)?;
            let r = evaluate(&out.model, &test.samples)?;
            Ok(AblationRow {
                flags,
                label_acc: r.disease.acc,
                label_f1: r.disease.f1,
                concept_acc: r.concept.acc,
                concept_f1: r.concept.f1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub runs: Vec<SeedRun>,
    pub disease_acc: MeanStd,
    pub disease_f1: MeanStd,
    pub disease_auc: Option<MeanStd>,
    pub concept_acc: MeanStd,
    pub concept_f1: MeanStd,
}

impl SeedSummary {
    pub fn from_runs(runs: Vec<SeedRun>) -> Self {
        let pick = |f: fn(&MetricsReport) -> f64| MeanStd::of(&runs.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
        let aucs: Option<Vec<f64>> = runs.iter().map(|r| r.metrics.disease.auc).collect();
        Self {
            disease_acc: pick(|m| m.disease.acc),
            disease_f1: pick(|m| m.disease.f1),
            disease_auc: aucs.map(|a| MeanStd::of(&a)),
            concept_acc: pick(|m| m.concept.acc),
            concept_f1: pick(|m| m.concept.f1),
            runs,
        }
    }
}

impl fmt::Display for SeedSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.runs {
            writeln!(
                f,
                "seed {}: disease ACC {:.3} F1 {:.3}, concept ACC {:.3} F1 {:.3} (best epoch {})",
                r.seed, r.metrics.disease.acc, r.metrics.disease.f1, r.metrics.concept.acc, r.metrics.concept.f1, r.best_epoch
            )?;
        }
        writeln!(f, "disease ACC {}  F1 {}", self.disease_acc, self.disease_f1)?;
        write!(f, "concept ACC {}  F1 {}", self.concept_acc, self.concept_f1)
    }
}

/// Trains once per seed on the same split and tests each run.
pub fn train_seeds(base: &TrainConfig, dataset: &Dataset, split: &Split, seeds: &[u64]) -> Result<SeedSummary> {
    let test = dataset.subset(&split.test);
    let runs = seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..base.clone() };
            let out = train(&cfg, dataset, split)?;
            Ok(SeedRun {
                seed,
                best_epoch: out.history.best_epoch,
                metrics: evaluate(&out.model, &test.samples)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedSummary::from_runs(runs))
}
