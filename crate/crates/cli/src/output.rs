//! Result tables and summaries written by `train` and `sweep`.

use std::path::Path;

use serde::Serialize;
use visprompt_core::data::NoiseType;
use visprompt_core::pipeline::Variant;
use visprompt_core::trainer::{mean_std, MetricsRecord};

use crate::CliError;

pub const RESULTS_HEADER: [&str; 6] = ["dataset", "variant", "noise_type", "noise_rate", "seed", "accuracy"];
pub const METRICS_HEADER: [&str; 6] = [
    "epoch",
    "lr",
    "train_loss",
    "test_acc",
    "reliable_count",
    "partition_precision",
];

/// One final accuracy of one sweep cell and seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRecord {
    pub dataset: String,
    pub variant: Variant,
    pub noise_type: NoiseType,
    pub noise_rate: f64,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
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

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub dataset: String,
    pub variant: Variant,
    pub noise_type: NoiseType,
    pub noise_rate: f64,
    pub seeds: usize,
    pub accuracy: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantAverage {
    pub variant: Variant,
    /// Mean over noise settings of the per-cell seed means.
    pub average: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub cells: Vec<CellSummary>,
    pub variant_averages: Vec<VariantAverage>,
}

fn to_csv<const N: usize>(header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(internal)?;
    for row in rows {
        w.write_record(&row).map_err(internal)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(internal)
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

pub fn results_csv(records: &[ResultRecord]) -> Result<String, CliError> {
    to_csv(
        RESULTS_HEADER,
        records.iter().map(|r| {
            [
                r.dataset.clone(),
                r.variant.to_string(),
                r.noise_type.to_string(),
                r.noise_rate.to_string(),
                r.seed.to_string(),
                r.accuracy.to_string(),
            ]
        }),
    )
}

pub fn metrics_csv(metrics: &[MetricsRecord]) -> Result<String, CliError> {
    to_csv(
        METRICS_HEADER,
        metrics.iter().map(|m| {
            [
                m.epoch.to_string(),
                m.lr.to_string(),
                m.train_loss.to_string(),
                m.test_accuracy.to_string(),
                m.reliable_count.map(|c| c.to_string()).unwrap_or_default(),
                m.partition_precision.map(|p| p.to_string()).unwrap_or_default(),
            ]
        }),
    )
}

/// Groups records by (dataset, variant, noise type, rate) in first-seen
/// order.
pub fn summarize(records: &[ResultRecord]) -> Summary {
    let mut cells: Vec<(CellSummary, Vec<f64>)> = Vec::new();
    for r in records {
        let key = |c: &CellSummary| {
            c.dataset == r.dataset && c.variant == r.variant && c.noise_type == r.noise_type && c.noise_rate == r.noise_rate
        };
        match cells.iter_mut().find(|(c, _)| key(c)) {
            Some((_, accs)) => accs.push(r.accuracy),
            None => cells.push((
                CellSummary {
                    dataset: r.dataset.clone(),
                    variant: r.variant,
                    noise_type: r.noise_type,
                    noise_rate: r.noise_rate,
                    seeds: 0,
                    accuracy: MeanStd { mean: 0.0, std: 0.0 },
                },
                vec![r.accuracy],
            )),
        }
    }
    let cells: Vec<CellSummary> = cells
        .into_iter()
        .map(|(mut c, accs)| {
            c.seeds = accs.len();
            c.accuracy = MeanStd::of(&accs);
            c
        })
        .collect();
    let mut variants: Vec<Variant> = Vec::new();
    for c in &cells {
        if !variants.contains(&c.variant) {
            variants.push(c.variant);
        }
    }
    let variant_averages = variants
        .into_iter()
        .map(|v| {
            let means: Vec<f64> = cells.iter().filter(|c| c.variant == v).map(|c| c.accuracy.mean).collect();
            VariantAverage {
                variant: v,
                average: means.iter().sum::<f64>() / means.len() as f64,
            }
        })
        .collect();
    Summary { cells, variant_averages }
}

pub fn json_string<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(internal)?;
    s.push('\n');
    Ok(s)
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

/// `results.csv` and `summary.json` in `dir`.
pub fn emit_results(records: &[ResultRecord], dir: &Path) -> Result<Summary, CliError> {
    if records.is_empty() {
        return Err(CliError::Internal("no result records to write".into()));
    }
    let summary = summarize(records);
    write_file(&dir.join("results.csv"), &results_csv(records)?)?;
    write_file(&dir.join("summary.json"), &json_string(&summary)?)?;
    Ok(summary)
}
