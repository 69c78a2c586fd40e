//! Forecast metrics, evaluation over window sets and result tables.

use std::fmt::Write as _;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{expected_k_boundaries, topk_boundaries};
use crate::backbone::{Backbone, ForecastWindow};
use crate::baselines::FixedPatcher;
use crate::error::{invalid_arg, Error, Result};
use crate::partition::{partition_to_boundaries, BoundaryVector, CompressionConfig};
use crate::policy::{boundary_logit, sample_n, PatchPolicy};
use crate::trainer::lift_levels;

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(invalid_arg(format!(
            "prediction length {} vs target length {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// How a learned policy turns logits into one boundary vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    /// Per-step argmax level.
    Modal,
    /// One stochastic draw.
    Sample,
    /// Top-k boundary logits for a target compression rate.
    TopK { rate: f64 },
    /// Top-k with k the expected boundary count.
    ExpectedK,
}

impl Default for Selection {
    fn default() -> Self {
        Selection::Modal
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Patcher<'a> {
    Learned { policy: &'a PatchPolicy, selection: Selection },
    Fixed(&'a FixedPatcher),
}

impl Patcher<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Patcher::Learned { .. } => "reinpatch",
            Patcher::Fixed(p) => p.name(),
        }
    }

    /// Boundaries for `input` at `depth` levels, before compression enforcement.
    pub fn boundaries(&self, input: &[f64], depth: usize, rng: &mut ChaCha8Rng) -> Result<BoundaryVector> {
        let b = match *self {
            Patcher::Fixed(p) => partition_to_boundaries(&p.partition(input, rng)?),
            Patcher::Learned { policy, selection } => {
                let out = policy.forward(input)?;
                match selection {
                    Selection::Modal => out.modal(),
                    Selection::Sample => sample_n(&out, 1, rng).swap_remove(0).0,
                    Selection::TopK { rate } => BoundaryVector::binary(&topk_boundaries(&boundary_logit(&out, 1)?, rate)?)?,
                    Selection::ExpectedK => BoundaryVector::binary(&expected_k_boundaries(&boundary_logit(&out, 1)?)?)?,
                }
            }
        };
        Ok(lift_levels(&b, depth))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mse: f64,
    pub mae: f64,
    /// `(mse, mae)` per horizon step, averaged over windows.
    pub per_step: Vec<(f64, f64)>,
    pub windows: usize,
    /// Mean input points per patch after enforcement.
    pub compression: f64,
}

/// Average metrics over `windows`. Sampling and random patchers draw from a
/// stream seeded by `seed`, so reports are reproducible.
pub fn evaluate(
    backbone: &Backbone,
    patcher: Patcher<'_>,
    compression: &CompressionConfig,
    windows: &[ForecastWindow],
    seed: u64,
) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(invalid_arg("no windows to evaluate"));
    }
    let horizon = backbone.config().horizon;
    let depth = backbone.config().levels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sq = vec![0.0; horizon];
    let mut abs = vec![0.0; horizon];
    let mut rate = 0.0;
    for w in windows {
        let b = patcher.boundaries(&w.input, depth, &mut rng)?;
        let enforced = crate::partition::enforce_min_compression(&b, compression);
        rate += crate::partition::boundary_compression_rate(&enforced, 1);
        let pred = backbone.forecast(w, &enforced, compression)?;
        check_pair(&pred, &w.target)?;
        for (h, (p, t)) in pred.iter().zip(&w.target).enumerate() {
            let e = p - t;
            if !e.is_finite() {
                return Err(Error::NonFinite(format!("forecast error at horizon step {h}")));
            }
            sq[h] += e * e;
            abs[h] += e.abs();
        }
    }
    let n = windows.len() as f64;
    let per_step: Vec<(f64, f64)> = sq.iter().zip(&abs).map(|(s, a)| (s / n, a / n)).collect();
    let h = horizon as f64;
    Ok(EvalReport {
        mse: per_step.iter().map(|p| p.0).sum::<f64>() / h,
        mae: per_step.iter().map(|p| p.1).sum::<f64>() / h,
        per_step,
        windows: windows.len(),
        compression: rate / n,
    })
}

/// One evaluated (method, dataset, lookback, horizon, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub dataset: String,
    pub lookback: usize,
    pub horizon: usize,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
}

pub fn write_results_csv<W: Write>(out: W, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["method", "dataset", "lookback", "horizon", "seed", "mse", "mae"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv<R: std::io::Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Seed aggregate for one (method, dataset, horizon) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub dataset: String,
    pub horizon: usize,
    pub runs: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Group rows by (method, dataset, horizon) in first-appearance order.
pub fn aggregate(results: &[ResultRow]) -> Vec<TableRow> {
    let mut keys: Vec<(&str, &str, usize)> = Vec::new();
    for r in results {
        let k = (r.method.as_str(), r.dataset.as_str(), r.horizon);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, dataset, horizon)| {
            let cell: Vec<&ResultRow> = results
                .iter()
                .filter(|r| r.method == method && r.dataset == dataset && r.horizon == horizon)
                .collect();
            let (mse_mean, mse_std) = mean_std(&cell.iter().map(|r| r.mse).collect::<Vec<_>>());
            let (mae_mean, mae_std) = mean_std(&cell.iter().map(|r| r.mae).collect::<Vec<_>>());
            TableRow {
                method: method.to_string(),
                dataset: dataset.to_string(),
                horizon,
                runs: cell.len(),
                mse_mean,
                mse_std,
                mae_mean,
                mae_std,
            }
        })
        .collect()
}

const TABLE_HEADER: [&str; 8] = ["method", "dataset", "horizon", "runs", "mse_mean", "mse_std", "mae_mean", "mae_std"];

/// Aggregated table as `(csv, aligned text)`.
pub fn emit_table(results: &[ResultRow]) -> Result<(String, String)> {
    let rows = aggregate(results);
    let cells: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                r.dataset.clone(),
                r.horizon.to_string(),
                r.runs.to_string(),
                format!("{:.6}", r.mse_mean),
                format!("{:.6}", r.mse_std),
                format!("{:.6}", r.mae_mean),
                format!("{:.6}", r.mae_std),
            ]
        })
        .collect();

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TABLE_HEADER)?;
    for c in &cells {
        w.write_record(c)?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
        .map_err(|e| Error::Format(e.to_string()))?;

    let mut widths: Vec<usize> = TABLE_HEADER.iter().map(|h| h.len()).collect();
    for c in &cells {
        for (i, s) in c.iter().enumerate() {
            widths[i] = widths[i].max(s.len());
        }
    }
    let mut text = String::new();
    let line = |text: &mut String, fields: &[&str]| {
        let parts: Vec<String> = fields
            .iter()
            .enumerate()
            .map(|(i, f)| if i < 2 { format!("{f:<w$}", w = widths[i]) } else { format!("{f:>w$}", w = widths[i]) })
            .collect();
        let _ = writeln!(text, "{}", parts.join("  ").trim_end());
    };
    line(&mut text, &TABLE_HEADER);
    for c in &cells {
        let fields: Vec<&str> = c.iter().map(String::as_str).collect();
        line(&mut text, &fields);
    }
    Ok((csv, text))
}
