//! Per-batch minority profiling and hard sample mining.
//!
//! Minority classes are recomputed from scratch on every batch: classes are
//! taken smallest-first while their combined count stays strictly below half
//! the batch. Only minority classes with at least two samples in the batch
//! produce anchors.
//!
//! Two mining modes are supported:
//!
//! - class level: per minority class `c`, the `K` in-class samples with the
//!   lowest `p(c | x)` (hard positives) and the `K` out-of-class samples with
//!   the highest `p(c | x)` (hard negatives);
//! - instance level: per anchor, the `K` misclassified in-class samples
//!   farthest from it and the `K` out-of-class samples nearest to it, in
//!   embedding space.
//!
//! All selections break ties by the lower batch index. The anchor is never
//! its own positive.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datagen::AttributeSchema;
use crate::error::{CrlError, Result};
use crate::network::BatchView;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeProfile {
    /// Per-class counts in the batch.
    pub histogram: Vec<usize>,
    /// Minority classes in accumulation order (ascending count, then index).
    pub minority: Vec<usize>,
    /// Remaining classes, ascending index.
    pub majority: Vec<usize>,
}

impl AttributeProfile {
    pub fn is_minority(&self, class: usize) -> bool {
        self.minority.contains(&class)
    }

    pub fn minority_count(&self) -> usize {
        self.minority.iter().map(|&c| self.histogram[c]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchProfile {
    pub batch_size: usize,
    pub attributes: Vec<AttributeProfile>,
}

/// Smallest-first greedy split of one class histogram.
pub fn minority_classes(histogram: &[usize], batch_size: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..histogram.len()).collect();
    order.sort_by_key(|&c| (histogram[c], c));
    let mut total = 0;
    let mut minority = Vec::new();
    for c in order {
        // total + h < n / 2, in integers
        if 2 * (total + histogram[c]) < batch_size {
            total += histogram[c];
            minority.push(c);
        } else {
            break;
        }
    }
    minority
}

pub fn profile_batch(
    labels: ArrayView2<'_, usize>,
    schema: &AttributeSchema,
    batch_size: usize,
) -> Result<BatchProfile> {
    if batch_size == 0 {
        return Err(CrlError::Contract("batch size must be at least 1".into()));
    }
    if labels.nrows() != batch_size {
        return Err(CrlError::Contract(format!(
            "{} label rows for declared batch size {batch_size}",
            labels.nrows()
        )));
    }
    for row in labels.rows() {
        schema.check_labels(row)?;
    }
    let attributes = (0..schema.n_attr())
        .map(|j| {
            let mut histogram = vec![0; schema.cardinality(j)];
            for &l in labels.column(j) {
                histogram[l] += 1;
            }
            let minority = minority_classes(&histogram, batch_size);
            let majority = (0..histogram.len()).filter(|c| !minority.contains(c)).collect();
            AttributeProfile {
                histogram,
                minority,
                majority,
            }
        })
        .collect();
    Ok(BatchProfile {
        batch_size,
        attributes,
    })
}

/// A minority-class sample used as the reference point of triplets/pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Anchor {
    pub sample: usize,
    pub attr: usize,
    pub class: usize,
}

/// Minority (sample, attribute) anchors, ordered by attribute then sample.
pub fn anchors(profile: &BatchProfile, labels: ArrayView2<'_, usize>) -> Vec<Anchor> {
    let mut out = Vec::new();
    for (attr, ap) in profile.attributes.iter().enumerate() {
        for (sample, &class) in labels.column(attr).iter().enumerate() {
            if ap.histogram[class] >= 2 && ap.is_minority(class) {
                out.push(Anchor {
                    sample,
                    attr,
                    class,
                });
            }
        }
    }
    out
}

/// Minority classes of each attribute with enough samples to anchor.
fn eligible_classes(profile: &BatchProfile) -> impl Iterator<Item = (usize, usize)> + '_ {
    profile.attributes.iter().enumerate().flat_map(|(attr, ap)| {
        let mut classes: Vec<usize> = ap
            .minority
            .iter()
            .copied()
            .filter(|&c| ap.histogram[c] >= 2)
            .collect();
        classes.sort_unstable();
        classes.into_iter().map(move |c| (attr, c))
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiningMode {
    Class,
    #[default]
    Instance,
}

impl std::str::FromStr for MiningMode {
    type Err = CrlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class" => Ok(MiningMode::Class),
            "instance" => Ok(MiningMode::Instance),
            other => Err(CrlError::Config(format!(
                "unknown mining mode `{other}` (expected class|instance)"
            ))),
        }
    }
}

/// Hard positives and negatives for one minority class (`anchor == None`)
/// or one anchor instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardSet {
    pub attr: usize,
    pub class: usize,
    pub anchor: Option<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardSets {
    pub mode: MiningMode,
    pub k: usize,
    pub sets: Vec<HardSet>,
}

/// Up to `k` indices from `candidates`, ranked by `key` ascending (or
/// descending), ties to the lower index.
pub fn select_k(candidates: &[usize], key: impl Fn(usize) -> f64, k: usize, descending: bool) -> Vec<usize> {
    let mut ranked: Vec<(f64, usize)> = candidates.iter().map(|&i| (key(i), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        let by_key = if descending { b.0.total_cmp(&a.0) } else { a.0.total_cmp(&b.0) };
        by_key.then(a.1.cmp(&b.1))
    };
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k, cmp);
        ranked.truncate(k);
    }
    ranked.sort_by(cmp);
    ranked.into_iter().map(|(_, i)| i).collect()
}

fn check_view(profile: &BatchProfile, labels: ArrayView2<'_, usize>, view: &BatchView<'_>) -> Result<()> {
    let n = profile.batch_size;
    if labels.nrows() != n || view.batch_size() != n || view.n_attr() != profile.attributes.len() {
        return Err(CrlError::Contract(
            "profile, labels and forward outputs describe different batches".into(),
        ));
    }
    Ok(())
}

pub fn mine_class_level(
    profile: &BatchProfile,
    labels: ArrayView2<'_, usize>,
    view: &BatchView<'_>,
    k: usize,
) -> Result<HardSets> {
    check_view(profile, labels, view)?;
    let mut sets = Vec::new();
    for (attr, class) in eligible_classes(profile) {
        let column = labels.column(attr);
        let probs = view.probs[attr];
        let (inside, outside): (Vec<usize>, Vec<usize>) =
            (0..profile.batch_size).partition(|&i| column[i] == class);
        let score = |i: usize| probs[[i, class]];
        sets.push(HardSet {
            attr,
            class,
            anchor: None,
            positives: select_k(&inside, score, k, false),
            negatives: select_k(&outside, score, k, true),
        });
    }
    Ok(HardSets {
        mode: MiningMode::Class,
        k,
        sets,
    })
}

pub fn l2_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn mine_instance_level(
    profile: &BatchProfile,
    labels: ArrayView2<'_, usize>,
    view: &BatchView<'_>,
    k: usize,
) -> Result<HardSets> {
    check_view(profile, labels, view)?;
    let mut sets = Vec::new();
    for anchor in anchors(profile, labels) {
        let Anchor { sample, attr, class } = anchor;
        let column = labels.column(attr);
        let emb = view.embeddings[attr];
        let dist = |i: usize| l2_distance(emb.row(sample), emb.row(i));
        let misclassified: Vec<usize> = (0..profile.batch_size)
            .filter(|&i| i != sample && column[i] == class && view.predicted(attr, i) != class)
            .collect();
        let outside: Vec<usize> = (0..profile.batch_size).filter(|&i| column[i] != class).collect();
        sets.push(HardSet {
            attr,
            class,
            anchor: Some(sample),
            positives: select_k(&misclassified, dist, k, true),
            negatives: select_k(&outside, dist, k, false),
        });
    }
    Ok(HardSets {
        mode: MiningMode::Instance,
        k,
        sets,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub attr: usize,
    pub class: usize,
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub attr: usize,
    pub class: usize,
    pub anchor: usize,
    pub other: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSet {
    pub positive: Vec<Pair>,
    pub negative: Vec<Pair>,
}

impl PairSet {
    pub fn is_empty(&self) -> bool {
        self.positive.is_empty() && self.negative.is_empty()
    }
}

/// The hard set an anchor draws from, with the anchor removed from its
/// positives.
fn anchor_sets<'h>(hard: &'h HardSets, anchor: &Anchor) -> Option<(Vec<usize>, &'h [usize])> {
    let set = hard.sets.iter().find(|s| {
        s.attr == anchor.attr
            && s.class == anchor.class
            && match hard.mode {
                MiningMode::Class => s.anchor.is_none(),
                MiningMode::Instance => s.anchor == Some(anchor.sample),
            }
    })?;
    let positives = set.positives.iter().copied().filter(|&p| p != anchor.sample).collect();
    Some((positives, &set.negatives))
}

pub fn build_triplets(hard: &HardSets, anchors: &[Anchor]) -> TripletSet {
    let mut triplets = Vec::new();
    for a in anchors {
        let Some((positives, negatives)) = anchor_sets(hard, a) else {
            continue;
        };
        for &p in &positives {
            for &n in negatives {
                triplets.push(Triplet {
                    attr: a.attr,
                    class: a.class,
                    anchor: a.sample,
                    positive: p,
                    negative: n,
                });
            }
        }
    }
    TripletSet { triplets }
}

pub fn build_pairs(hard: &HardSets, anchors: &[Anchor]) -> PairSet {
    let mut pairs = PairSet::default();
    for a in anchors {
        let Some((positives, negatives)) = anchor_sets(hard, a) else {
            continue;
        };
        let pair = |other| Pair {
            attr: a.attr,
            class: a.class,
            anchor: a.sample,
            other,
        };
        pairs.positive.extend(positives.into_iter().map(pair));
        pairs.negative.extend(negatives.iter().map(|&n| pair(n)));
    }
    pairs
}
