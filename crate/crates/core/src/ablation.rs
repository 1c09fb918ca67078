//! Variant × seed comparison of gating configurations.

use serde::Serialize;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::gate::GateVariant;
use crate::model::{ModelConfig, ModelParams};
use crate::train::{evaluate, train, EpochRecord, TrainConfig};

/// Rows in reporting order: no gating, spatial only, channel only, full.
pub const TABLE_ORDER: [GateVariant; 4] = [
    GateVariant::Plain,
    GateVariant::SsOnly,
    GateVariant::CgOnly,
    GateVariant::Full,
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationConfig {
    pub variants: Vec<GateVariant>,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl AblationConfig {
    pub fn new(model: ModelConfig, train: TrainConfig, seeds: usize) -> Self {
        Self {
            variants: TABLE_ORDER.to_vec(),
            seeds: (0..seeds as u64).collect(),
            model,
            train,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub test_f1: f64,
    pub test_iou: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantRow {
    pub variant: GateVariant,
    pub runs: Vec<SeedResult>,
    /// Mean and sample standard deviation of test F1, in points (×100).
    pub mean_f1: f64,
    pub std_f1: f64,
    pub mean_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub test_images: usize,
    pub rows: Vec<VariantRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl AblationReport {
    pub fn row(&self, variant: GateVariant) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Mean test F1 of `full` minus `plain`, in points.
    pub fn margin(&self) -> Option<f64> {
        Some(self.row(GateVariant::Full)?.mean_f1 - self.row(GateVariant::Plain)?.mean_f1)
    }

    /// `DIRECTION full>plain: PASS margin=<x>` (or `FAIL`).
    pub fn verdict(&self) -> Option<String> {
        let m = self.margin()?;
        let tag = if m > 0.0 { "PASS" } else { "FAIL" };
        Some(format!("DIRECTION full>plain: {tag} margin={m:.4}"))
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<8} {:>9} {:>7} {:>9}  per-seed F1\n", "variant", "mean F1", "std", "mean IoU");
        for r in &self.rows {
            let per: Vec<String> = r.runs.iter().map(|x| format!("{:.2}", 100.0 * x.test_f1)).collect();
            s.push_str(&format!(
                "{:<8} {:>9.2} {:>7.2} {:>9.2}  {}\n",
                r.variant.as_str(),
                r.mean_f1,
                r.std_f1,
                r.mean_iou,
                per.join(" ")
            ));
        }
        s
    }
}

/// Trains every variant under every seed on the train split (model
/// selection on val) and scores the selected checkpoint on test. The seed
/// drives both initialisation and shuffling.
pub fn run_ablation(
    dataset: &Dataset,
    cfg: &AblationConfig,
    mut progress: impl FnMut(GateVariant, u64, &EpochRecord),
) -> Result<AblationReport> {
    if cfg.seeds.is_empty() || cfg.variants.is_empty() {
        return Err(Error::contract("ablation needs at least one variant and one seed"));
    }
    let test = dataset.split(Split::Test);
    if test.is_empty() {
        return Err(Error::contract("ablation needs a non-empty test split"));
    }
    let mut rows = Vec::new();
    for &variant in &cfg.variants {
        let mut runs = Vec::new();
        for &seed in &cfg.seeds {
            let start = std::time::Instant::now();
            let init = ModelParams::init(cfg.model.clone().with_variant(variant), seed)?;
            let tc = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let out = train(init, dataset, &tc, |r| progress(variant, seed, r))?;
            let m = evaluate(&out.best, &test, tc.threshold)?;
            runs.push(SeedResult {
                seed,
                best_epoch: out.best_epoch,
                test_f1: m.mean_f1,
                test_iou: m.mean_iou,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
        let f1: Vec<f64> = runs.iter().map(|r| 100.0 * r.test_f1).collect();
        let iou: Vec<f64> = runs.iter().map(|r| 100.0 * r.test_iou).collect();
        let (mean_f1, std_f1) = mean_std(&f1);
        rows.push(VariantRow {
            variant,
            runs,
            mean_f1,
            std_f1,
            mean_iou: mean_std(&iou).0,
        });
    }
    Ok(AblationReport {
        config: cfg.clone(),
        test_images: test.len(),
        rows,
    })
}
