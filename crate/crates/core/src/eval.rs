//! Attack-quality measurement.
//!
//! Success and transfer rates, a kernel two-sample statistic over lightness
//! channels, simple lightness statistics standing in for perceptual quality
//! scores, and the eight-variant ablation grid.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{run_batch, AttackConfig, AttackReport, BatchResult, BatchSummary, Switches, Variant};
use crate::colorspace::{rgb_to_lab, LabImage, RgbImage};
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::model::Model;

/// Written at the top of every table and summary so the lightness proxies
/// are not mistaken for perceptual quality metrics.
pub const PROXY_NOTE: &str = "naturalness columns are lightness statistics \
(mean |dL|, L variance, saturated fraction); they are proxies, not LPIPS/PIQE/NIQE";

const SATURATION_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightnessStats {
    pub mean_abs_delta_l: f64,
    pub var_before: f64,
    pub var_after: f64,
    /// Fraction of pixels of `after` with `L` at 0 or 1.
    pub frac_saturated: f64,
}

fn variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

pub fn lightness_stats(before: &LabImage, after: &LabImage) -> Result<LightnessStats> {
    if (before.width, before.height) != (after.width, after.height) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", before.width, before.height),
            got: format!("{}x{}", after.width, after.height),
        });
    }
    if before.l.is_empty() {
        return Err(Error::EmptySet);
    }
    let n = before.l.len() as f64;
    let mean_abs_delta_l = before.l.iter().zip(&after.l).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let saturated = after
        .l
        .iter()
        .filter(|&&l| l <= SATURATION_EPS || l >= 1.0 - SATURATION_EPS)
        .count();
    Ok(LightnessStats {
        mean_abs_delta_l,
        var_before: variance(&before.l),
        var_after: variance(&after.l),
        frac_saturated: saturated as f64 / n,
    })
}

/// Successes over attacked images. Every report counts as attacked unless
/// the model already got its input wrong.
pub fn success_rate<'a>(reports: impl IntoIterator<Item = &'a AttackReport>) -> Result<f64> {
    let (mut attacked, mut wins) = (0usize, 0usize);
    for r in reports {
        if r.correctly_classified {
            attacked += 1;
            wins += r.success as usize;
        }
    }
    if attacked == 0 {
        return Err(Error::EmptySet);
    }
    Ok(wins as f64 / attacked as f64)
}

/// Adversarial outputs of a batch, labeled with their clean labels.
pub fn batch_outputs(batch: &BatchResult) -> Vec<LabeledImage> {
    batch
        .items
        .iter()
        .map(|item| LabeledImage {
            image: item.report.output().clone(),
            label: item.report.label,
            id: item.id.clone(),
        })
        .collect()
}

/// Number of `adversarials` that `model` misclassifies.
pub fn fooled_count(adversarials: &[LabeledImage], model: &Model) -> Result<usize> {
    let fooled: Result<Vec<bool>> = adversarials
        .par_iter()
        .map(|d| Ok(model.predict(&d.image)? != d.label))
        .collect();
    Ok(fooled?.into_iter().filter(|&f| f).count())
}

/// Fraction of `adversarials` that `model` misclassifies.
pub fn transfer_eval(adversarials: &[LabeledImage], model: &Model) -> Result<f64> {
    if adversarials.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(fooled_count(adversarials, model)? as f64 / adversarials.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub fooled: usize,
    pub total: usize,
    pub rate: Option<f64>,
}

/// `cells[s][t]`: adversarials crafted on source `s`, scored by target `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub models: Vec<String>,
    pub cells: Vec<Vec<TransferCell>>,
}

impl TransferMatrix {
    pub fn rate(&self, source: usize, target: usize) -> Option<f64> {
        self.cells[source][target].rate
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# {PROXY_NOTE}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["source", "target", "fooled", "total", "rate"])?;
        for (s, row) in self.cells.iter().enumerate() {
            for (t, cell) in row.iter().enumerate() {
                w.write_record([
                    self.models[s].clone(),
                    self.models[t].clone(),
                    cell.fooled.to_string(),
                    cell.total.to_string(),
                    cell.rate.map(|r| format!("{r:.6}")).unwrap_or_default(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Attack `data` on every model and score each model's adversarials on
/// every other. The denominator is the set of images the source model
/// classified correctly; outputs of failed attacks are still correctly
/// classified by the source, so the diagonal equals the white-box rate.
pub fn transfer_matrix(
    models: &[(String, Model)],
    data: &[LabeledImage],
    config: &AttackConfig,
    workers: usize,
) -> Result<TransferMatrix> {
    if models.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut cells = Vec::with_capacity(models.len());
    for (_, source) in models {
        let batch = run_batch(source, data, config, workers)?;
        let outputs = batch_outputs(&batch);
        let mut row = Vec::with_capacity(models.len());
        for (_, target) in models {
            let fooled = if outputs.is_empty() { 0 } else { fooled_count(&outputs, target)? };
            row.push(TransferCell {
                fooled,
                total: outputs.len(),
                rate: (!outputs.is_empty()).then(|| fooled as f64 / outputs.len() as f64),
            });
        }
        cells.push(row);
    }
    Ok(TransferMatrix {
        models: models.iter().map(|(n, _)| n.clone()).collect(),
        cells,
    })
}

fn lightness_features(images: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
    let dims = images.first().ok_or(Error::EmptySet)?.dims();
    images
        .iter()
        .map(|img| {
            if img.dims() != dims {
                return Err(Error::ShapeMismatch {
                    expected: format!("{dims:?}"),
                    got: format!("{:?}", img.dims()),
                });
            }
            Ok(rgb_to_lab(img).l)
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median pairwise Euclidean distance over the pooled feature vectors,
/// falling back to 1 when it is zero.
pub fn median_heuristic_bandwidth(features: &[&[f64]]) -> f64 {
    let n = features.len();
    let mut dists: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| (i + 1..n).map(move |j| sq_dist(features[i], features[j]).sqrt()))
        .collect();
    if dists.is_empty() {
        return 1.0;
    }
    let mid = dists.len() / 2;
    let (_, m, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 && m.is_finite() {
        *m
    } else {
        1.0
    }
}

/// Unbiased squared MMD between two feature sets with the kernel
/// `exp(-|x - y|^2 / (2 sigma^2))`. A set with a single element contributes
/// no within-set term.
pub fn mmd_rbf_features(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: Option<f64>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    let sigma = match bandwidth {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {s}"))),
        None => {
            let pooled: Vec<&[f64]> = a.iter().chain(b).map(Vec::as_slice).collect();
            median_heuristic_bandwidth(&pooled)
        }
    };
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let k = |x: &[f64], y: &[f64]| (-gamma * sq_dist(x, y)).exp();
    let within = |s: &[Vec<f64>]| -> f64 {
        let n = s.len();
        if n < 2 {
            return 0.0;
        }
        let sum: f64 = (0..n)
            .into_par_iter()
            .map(|i| (i + 1..n).map(|j| k(&s[i], &s[j])).sum::<f64>())
            .sum();
        2.0 * sum / (n * (n - 1)) as f64
    };
    let cross: f64 = a
        .par_iter()
        .map(|x| b.iter().map(|y| k(x, y)).sum::<f64>())
        .sum::<f64>()
        / (a.len() * b.len()) as f64;
    Ok(within(a) + within(b) - 2.0 * cross)
}

/// [`mmd_rbf_features`] over the flattened `L` channels of two image sets.
pub fn mmd_rbf(a: &[RgbImage], b: &[RgbImage], bandwidth: Option<f64>) -> Result<f64> {
    let fa = lightness_features(a)?;
    let fb = lightness_features(b)?;
    if fa[0].len() != fb[0].len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a[0].dims()),
            got: format!("{:?}", b[0].dims()),
        });
    }
    mmd_rbf_features(&fa, &fb, bandwidth)
}

/// One row of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    #[serde(flatten)]
    pub switches: Switches,
    pub attacked: usize,
    pub successes: usize,
    pub success_rate: Option<f64>,
    /// Averaged over successful attacks.
    pub mean_abs_delta_l: Option<f64>,
    pub mean_var_change: Option<f64>,
    pub mean_frac_saturated: Option<f64>,
}

impl AblationRow {
    pub fn from_batch(variant: Variant, batch: &BatchResult) -> Self {
        let s = &batch.summary;
        Self {
            variant,
            switches: variant.switches(),
            attacked: s.attacked,
            successes: s.successes,
            success_rate: s.success_rate,
            mean_abs_delta_l: s.mean_abs_delta_l,
            mean_var_change: s.mean_var_change,
            mean_frac_saturated: s.mean_frac_saturated,
        }
    }
}

/// Run ALA0..ALA7 in order on the same data. Variants run one after
/// another; each batch is parallel internally.
pub fn run_ablation(
    model: &Model,
    data: &[LabeledImage],
    base: &AttackConfig,
    workers: usize,
) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let batch = run_batch(model, data, &base.with_variant(v), workers)?;
            Ok(AblationRow::from_batch(v, &batch))
        })
        .collect()
}

/// One-row CSV of a batch summary.
pub fn write_batch_summary_csv<W: Write>(summary: &BatchSummary, mut out: W) -> Result<()> {
    writeln!(out, "# {PROXY_NOTE}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "total",
        "attacked",
        "successes",
        "success_rate",
        "mean_first_success_iter",
        "mean_abs_delta_l",
        "mean_var_change",
        "mean_frac_saturated",
    ])?;
    w.write_record([
        summary.total.to_string(),
        summary.attacked.to_string(),
        summary.successes.to_string(),
        opt(summary.success_rate),
        opt(summary.mean_first_success_iter),
        opt(summary.mean_abs_delta_l),
        opt(summary.mean_var_change),
        opt(summary.mean_frac_saturated),
    ])?;
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut out: W) -> Result<()> {
    writeln!(out, "# {PROXY_NOTE}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "variant",
        "range",
        "dist",
        "non_monotonic",
        "random_init",
        "attacked",
        "successes",
        "success_rate",
        "mean_abs_delta_l",
        "mean_var_change",
        "mean_frac_saturated",
    ])?;
    for r in rows {
        let s = r.switches;
        w.write_record([
            r.variant.name().to_string(),
            s.range.to_string(),
            s.dist.to_string(),
            s.non_monotonic.to_string(),
            s.random_init.to_string(),
            r.attacked.to_string(),
            r.successes.to_string(),
            opt(r.success_rate),
            opt(r.mean_abs_delta_l),
            opt(r.mean_var_change),
            opt(r.mean_frac_saturated),
        ])?;
    }
    w.flush()?;
    Ok(())
}
