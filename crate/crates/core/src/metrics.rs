//! Class-balanced evaluation.
//!
//! The headline metric is mean sensitivity: the arithmetic mean of per-class
//! recalls of one attribute, reported in percent. Classes absent from the
//! evaluated labels are left out of the mean and listed in the report.

use std::fmt;
use std::fmt::Write as _;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::AttributeSchema;
use crate::error::{CrlError, Result};

/// Per-class recall (`None` for classes without support) and support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRecalls {
    pub recalls: Vec<Option<f64>>,
    pub support: Vec<usize>,
}

pub fn class_recalls(
    predictions: ArrayView2<'_, usize>,
    labels: ArrayView2<'_, usize>,
    n_classes: usize,
    attr: usize,
) -> Result<ClassRecalls> {
    if predictions.dim() != labels.dim() {
        return Err(CrlError::Contract(format!(
            "predictions {:?} and labels {:?} are not aligned",
            predictions.dim(),
            labels.dim()
        )));
    }
    if labels.nrows() == 0 {
        return Err(CrlError::Evaluation("no test samples".into()));
    }
    let mut support = vec![0usize; n_classes];
    let mut hits = vec![0usize; n_classes];
    for (&p, &l) in predictions.column(attr).iter().zip(labels.column(attr)) {
        if l >= n_classes {
            return Err(CrlError::Contract(format!("label {l} out of range for attribute {attr}")));
        }
        support[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let recalls = support
        .iter()
        .zip(&hits)
        .map(|(&s, &h)| (s > 0).then(|| h as f64 / s as f64))
        .collect();
    Ok(ClassRecalls { recalls, support })
}

/// Mean of the supported per-class recalls, in percent.
pub fn mean_sensitivity(
    predictions: ArrayView2<'_, usize>,
    labels: ArrayView2<'_, usize>,
    schema: &AttributeSchema,
    attr: usize,
) -> Result<f64> {
    let r = class_recalls(predictions, labels, schema.cardinality(attr), attr)?;
    Ok(mean_of_supported(&r.recalls))
}

fn mean_of_supported(recalls: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = recalls.iter().flatten().copied().collect();
    100.0 * present.iter().sum::<f64>() / present.len() as f64
}

/// `max / min` over nonzero counts.
pub fn imbalance_ratio_value(counts: &[usize]) -> Option<f64> {
    let nonzero = counts.iter().copied().filter(|&c| c > 0);
    let max = nonzero.clone().max()?;
    let min = nonzero.min()?;
    Some(max as f64 / min as f64)
}

/// Imbalance ratio written `1:x`, with `x` rounded to an integer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ImbalanceRatio(pub u64);

impl fmt::Display for ImbalanceRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "1:{}", self.0)
    }
}

pub fn imbalance_ratio(counts: &[usize]) -> Result<ImbalanceRatio> {
    imbalance_ratio_value(counts)
        .map(|r| ImbalanceRatio(r.round() as u64))
        .ok_or_else(|| CrlError::Evaluation("imbalance ratio needs a nonzero class count".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub attr: usize,
    pub recalls: Vec<Option<f64>>,
    pub support: Vec<usize>,
    /// Classes without test support, left out of the mean.
    pub excluded_classes: Vec<usize>,
    pub mean_sensitivity: f64,
    pub imbalance_ratio: ImbalanceRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub attributes: Vec<AttributeReport>,
    pub average_mean_sensitivity: f64,
    pub n_samples: usize,
    /// SHA-256 of the evaluated label matrix; reports are only comparable
    /// when this matches.
    pub test_fingerprint: String,
}

pub fn label_fingerprint(labels: ArrayView2<'_, usize>) -> String {
    let mut h = Sha256::new();
    h.update((labels.nrows() as u64).to_le_bytes());
    h.update((labels.ncols() as u64).to_le_bytes());
    for &l in labels.iter() {
        h.update((l as u32).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Builds the per-attribute report. `ratio_counts[j]` are the class counts
/// the imbalance ratio is quoted from (typically the training split).
pub fn evaluate(
    predictions: ArrayView2<'_, usize>,
    labels: ArrayView2<'_, usize>,
    schema: &AttributeSchema,
    ratio_counts: &[Vec<usize>],
) -> Result<EvalReport> {
    if ratio_counts.len() != schema.n_attr() {
        return Err(CrlError::Contract("ratio counts do not match schema".into()));
    }
    let mut attributes = Vec::with_capacity(schema.n_attr());
    for (attr, counts) in ratio_counts.iter().enumerate() {
        let r = class_recalls(predictions, labels, schema.cardinality(attr), attr)?;
        let excluded_classes = r
            .recalls
            .iter()
            .enumerate()
            .filter_map(|(c, v)| v.is_none().then_some(c))
            .collect();
        attributes.push(AttributeReport {
            attr,
            mean_sensitivity: mean_of_supported(&r.recalls),
            recalls: r.recalls,
            support: r.support,
            excluded_classes,
            imbalance_ratio: imbalance_ratio(counts)?,
        });
    }
    let average_mean_sensitivity =
        attributes.iter().map(|a| a.mean_sensitivity).sum::<f64>() / attributes.len() as f64;
    Ok(EvalReport {
        attributes,
        average_mean_sensitivity,
        n_samples: labels.nrows(),
        test_fingerprint: label_fingerprint(labels),
    })
}

impl EvalReport {
    /// Aligned-column text summary.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>5}  {:>8}  {:>9}  recalls", "attr", "ratio", "mean_sens");
        for a in &self.attributes {
            let recalls: Vec<String> = a
                .recalls
                .iter()
                .map(|r| r.map_or_else(|| "-".to_string(), |v| format!("{v:.3}")))
                .collect();
            let _ = writeln!(
                out,
                "{:>5}  {:>8}  {:>9.2}  {}",
                a.attr,
                a.imbalance_ratio.to_string(),
                a.mean_sensitivity,
                recalls.join(" ")
            );
        }
        let _ = writeln!(
            out,
            "average mean sensitivity {:.2}% over {} samples",
            self.average_mean_sensitivity, self.n_samples
        );
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub attr: usize,
    pub ratio: ImbalanceRatio,
    pub method: String,
    /// Candidate minus baseline mean sensitivity, percentage points.
    pub gain: f64,
}

/// Gain of each candidate over the baseline, rows ordered by ascending
/// imbalance ratio (then attribute, then candidate order).
pub fn gain_table(baseline: &EvalReport, candidates: &[(String, EvalReport)]) -> Result<Vec<GainRow>> {
    for (name, c) in candidates {
        if c.test_fingerprint != baseline.test_fingerprint
            || c.attributes.len() != baseline.attributes.len()
        {
            return Err(CrlError::Contract(format!(
                "report `{name}` was evaluated on a different test set"
            )));
        }
    }
    let mut order: Vec<usize> = (0..baseline.attributes.len()).collect();
    order.sort_by_key(|&j| (baseline.attributes[j].imbalance_ratio, j));
    let mut rows = Vec::with_capacity(order.len() * candidates.len());
    for j in order {
        let base = &baseline.attributes[j];
        for (name, c) in candidates {
            rows.push(GainRow {
                attr: j,
                ratio: base.imbalance_ratio,
                method: name.clone(),
                gain: c.attributes[j].mean_sensitivity - base.mean_sensitivity,
            });
        }
    }
    Ok(rows)
}

pub fn gain_tsv(rows: &[GainRow]) -> String {
    let mut out = String::from("attr\tratio\tmethod\tgain\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}\t{:.4}", r.attr, r.ratio, r.method, r.gain);
    }
    out
}

pub fn gain_text(rows: &[GainRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:>5}  {:>8}  {:<width$}  {:>8}\n", "attr", "ratio", "method", "gain");
    for r in rows {
        let _ = writeln!(
            out,
            "{:>5}  {:>8}  {:<width$}  {:>+8.2}",
            r.attr,
            r.ratio.to_string(),
            r.method,
            r.gain
        );
    }
    out
}
