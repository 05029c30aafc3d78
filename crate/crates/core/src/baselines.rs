//! Classical imbalance handling: resampling keyed to one reference attribute
//! and inverse-frequency cost-sensitive cross-entropy.

use ndarray::ArrayView2;
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::datagen::{AttributeSchema, Dataset};
use crate::error::{CrlError, Result};
use crate::losses::{weighted_ce_impl, LossBundle};
use crate::metrics::imbalance_ratio_value;
use crate::network::BatchView;
use crate::rng::{seeded, STREAM_SAMPLER};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    #[default]
    Uniform,
    Oversample,
    Downsample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerPlan {
    pub mode: SamplerMode,
    pub reference_attr: usize,
    /// Expected number of draws of each dataset index per epoch.
    pub inclusion_weights: Vec<f64>,
    /// Sample indices for one epoch, already shuffled.
    pub indices: Vec<usize>,
    pub seed: u64,
}

fn indices_by_class(ds: &Dataset, attr: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); ds.schema().cardinality(attr)];
    for (i, &l) in ds.labels().column(attr).iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

/// Attribute with the largest max/min class-count ratio (lowest index wins).
pub fn most_imbalanced_attr(ds: &Dataset) -> usize {
    (0..ds.schema().n_attr())
        .map(|j| (j, imbalance_ratio_value(&ds.class_counts(j)).unwrap_or(1.0)))
        .fold((0, f64::NEG_INFINITY), |best, (j, r)| if r > best.1 { (j, r) } else { best })
        .0
}

pub fn make_sampler(ds: &Dataset, mode: SamplerMode, reference_attr: usize, seed: u64) -> Result<SamplerPlan> {
    if reference_attr >= ds.schema().n_attr() {
        return Err(CrlError::Config(format!(
            "reference attribute {reference_attr} out of range ({} attributes)",
            ds.schema().n_attr()
        )));
    }
    let mut rng = seeded(seed, STREAM_SAMPLER);
    let by_class = indices_by_class(ds, reference_attr);
    let n = ds.len();
    let mut weights = vec![0.0; n];
    let mut indices = Vec::new();
    match mode {
        SamplerMode::Uniform => {
            indices.extend(0..n);
            weights.fill(1.0);
        }
        SamplerMode::Oversample => {
            let target = by_class.iter().map(Vec::len).max().unwrap_or(0);
            for members in by_class.iter().filter(|m| !m.is_empty()) {
                indices.extend_from_slice(members);
                for _ in members.len()..target {
                    indices.push(*members.choose(&mut rng).expect("non-empty class"));
                }
                let w = target as f64 / members.len() as f64;
                for &i in members {
                    weights[i] = w;
                }
            }
        }
        SamplerMode::Downsample => {
            if let Some(c) = by_class.iter().position(Vec::is_empty) {
                return Err(CrlError::Config(format!(
                    "cannot down-sample: class {c} of attribute {reference_attr} has no samples"
                )));
            }
            let target = by_class.iter().map(Vec::len).min().unwrap_or(0);
            for members in &by_class {
                let chosen = members.choose_multiple(&mut rng, target);
                indices.extend(chosen.copied());
                let w = target as f64 / members.len() as f64;
                for &i in members {
                    weights[i] = w;
                }
            }
        }
    }
    indices.shuffle(&mut rng);
    Ok(SamplerPlan {
        mode,
        reference_attr,
        inclusion_weights: weights,
        indices,
        seed,
    })
}

/// Per attribute, per class loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<Vec<f64>>,
}

impl ClassWeights {
    pub fn uniform(schema: &AttributeSchema) -> Self {
        Self {
            weights: schema.cardinalities().iter().map(|&c| vec![1.0; c]).collect(),
        }
    }

    pub fn get(&self, attr: usize, class: usize) -> f64 {
        self.weights[attr][class]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            weights: self
                .weights
                .iter()
                .map(|w| w.iter().map(|v| v * factor).collect())
                .collect(),
        }
    }
}

/// Raw inverse-frequency weights `n / (|Z_j| * max(count, 1))`.
pub fn raw_cost_weights(counts: &[usize], n: usize) -> Vec<f64> {
    let card = counts.len() as f64;
    counts
        .iter()
        .map(|&c| n as f64 / (card * c.max(1) as f64))
        .collect()
}

/// Inverse-frequency weights rescaled so the sample-mean weight over `ds`
/// is 1 for every attribute.
pub fn cost_weights(ds: &Dataset) -> ClassWeights {
    let n = ds.len();
    let weights = (0..ds.schema().n_attr())
        .map(|j| {
            let counts = ds.class_counts(j);
            let raw = raw_cost_weights(&counts, n);
            let mean: f64 = counts.iter().zip(&raw).map(|(&c, w)| c as f64 * w).sum::<f64>() / n as f64;
            raw.into_iter().map(|w| w / mean).collect()
        })
        .collect();
    ClassWeights { weights }
}

/// Cross-entropy with each sample-attribute term scaled by the weight of its
/// true class.
pub fn weighted_cross_entropy(
    view: &BatchView<'_>,
    labels: ArrayView2<'_, usize>,
    weights: &ClassWeights,
) -> Result<LossBundle> {
    if weights.weights.len() != view.n_attr()
        || weights.weights.iter().zip(&view.probs).any(|(w, p)| w.len() != p.ncols())
    {
        return Err(CrlError::Contract("class weights do not match the model heads".into()));
    }
    weighted_ce_impl(view, labels, Some(&|j, c| weights.get(j, c)))
}
