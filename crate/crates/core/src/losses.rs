//! Cross-entropy and the class rectification losses.
//!
//! Every loss returns a [`LossBundle`] holding the scalar value and the
//! gradient with respect to what it reads: logits for cross-entropy,
//! embeddings (normalised branch features) for the rectification terms.
//! Mined index sets are constants for differentiation.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datagen::AttributeSchema;
use crate::error::{CrlError, Result};
use crate::mining::{
    anchors, build_pairs, build_triplets, l2_distance, mine_class_level, mine_instance_level,
    profile_batch, Anchor, BatchProfile, HardSets, MiningMode, Pair, PairSet, TripletSet,
};
use crate::network::BatchView;

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub ce: f64,
    pub crl: f64,
    pub triplets: usize,
    pub active_triplets: usize,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    /// Pair distances that fell outside the histogram range.
    pub clamped_distances: usize,
    /// Set when the distribution loss saw an empty positive or negative set.
    pub empty_pair_set: bool,
    /// Attributes that contributed a rectification term.
    pub crl_attributes: usize,
}

#[derive(Clone, Debug)]
pub struct LossBundle {
    pub value: f64,
    pub grad_logits: Option<Vec<Array2<f64>>>,
    pub grad_embeddings: Option<Vec<Array2<f64>>>,
    pub diagnostics: LossDiagnostics,
}

fn zeros_like(views: &[ArrayView2<'_, f64>]) -> Vec<Array2<f64>> {
    views.iter().map(|v| Array2::zeros(v.dim())).collect()
}

fn check_labels(view: &BatchView<'_>, labels: ArrayView2<'_, usize>) -> Result<()> {
    if labels.dim() != (view.batch_size(), view.n_attr()) {
        return Err(CrlError::Contract(format!(
            "labels have shape {:?}, outputs describe ({}, {})",
            labels.dim(),
            view.batch_size(),
            view.n_attr()
        )));
    }
    for (j, probs) in view.probs.iter().enumerate() {
        if let Some(&bad) = labels.column(j).iter().find(|&&l| l >= probs.ncols()) {
            return Err(CrlError::Contract(format!(
                "label {bad} out of range for attribute {j} with {} classes",
                probs.ncols()
            )));
        }
    }
    Ok(())
}

/// `-(1/n) sum_i sum_j w_ij log p(a_ij | x_ij)`; unit weights when `weight`
/// is `None`.
pub(crate) fn weighted_ce_impl(
    view: &BatchView<'_>,
    labels: ArrayView2<'_, usize>,
    weight: Option<&dyn Fn(usize, usize) -> f64>,
) -> Result<LossBundle> {
    check_labels(view, labels)?;
    let n = view.batch_size();
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(view.n_attr());
    for (j, probs) in view.probs.iter().enumerate() {
        let mut g = probs.to_owned();
        for i in 0..n {
            let a = labels[[i, j]];
            let w = weight.map_or(1.0, |f| f(j, a));
            let p = probs[[i, a]];
            // NaN must survive the clamp so divergence is detected.
            let p = if p < PROB_FLOOR { PROB_FLOOR } else { p };
            value -= w * p.ln();
            let mut row = g.row_mut(i);
            row[a] -= 1.0;
            row *= w * inv_n;
        }
        grads.push(g);
    }
    value *= inv_n;
    Ok(LossBundle {
        value,
        grad_logits: Some(grads),
        grad_embeddings: None,
        diagnostics: LossDiagnostics {
            ce: value,
            ..Default::default()
        },
    })
}

pub fn cross_entropy(view: &BatchView<'_>, labels: ArrayView2<'_, usize>) -> Result<LossBundle> {
    weighted_ce_impl(view, labels, None)
}

/// Class margin `2 pi / |Z_j|`.
pub fn margin(schema: &AttributeSchema, attr: usize) -> f64 {
    2.0 * PI / schema.cardinality(attr) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginSpec {
    pub per_attr: Vec<f64>,
    pub apc: f64,
}

impl MarginSpec {
    pub fn from_schema(schema: &AttributeSchema, apc: f64) -> Result<Self> {
        let spec = Self {
            per_attr: (0..schema.n_attr()).map(|j| margin(schema, j)).collect(),
            apc,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_attr.iter().chain([&self.apc]).any(|&m| m.is_nan() || m <= 0.0) {
            return Err(CrlError::Config("margins must be positive".into()));
        }
        Ok(())
    }
}

/// `tau` uniformly spaced bin centres over `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub bins: usize,
    pub min: f64,
    pub max: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            bins: 51,
            min: 0.0,
            max: 2.0,
        }
    }
}

impl HistogramSpec {
    pub fn new(bins: usize, min: f64, max: f64) -> Result<Self> {
        let spec = Self { bins, min, max };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(CrlError::Config(format!("histogram needs >= 2 bins, got {}", self.bins)));
        }
        if !self.min.is_finite() || !self.max.is_finite() || self.max <= self.min {
            return Err(CrlError::Config("histogram range must be finite with max > min".into()));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.bins - 1) as f64
    }

    pub fn center(&self, t: usize) -> f64 {
        self.min + t as f64 * self.step()
    }

    /// Triangular-kernel assignment of `d`: `(lower_bin, weight_upper)`, the
    /// lower bin receiving `1 - weight_upper`. A distance exactly on a bin
    /// centre lands wholly in that bin. `None` when `d` is out of range.
    pub fn locate(&self, d: f64) -> Option<BinLocation> {
        if !(d >= self.min && d <= self.max) {
            return None;
        }
        let pos = (d - self.min) / self.step();
        let t = (pos.floor() as usize).min(self.bins - 2);
        Some((t, (pos - t as f64).clamp(0.0, 1.0)))
    }
}

/// Adds `scale * d dist(a, b) / d a` to `ga` and its negative to `gb`.
fn add_distance_grad(
    grads: &mut Array2<f64>,
    emb: ArrayView2<'_, f64>,
    a: usize,
    b: usize,
    dist: f64,
    scale: f64,
) {
    if dist <= 0.0 || scale == 0.0 {
        return;
    }
    let coef = scale / dist;
    for k in 0..emb.ncols() {
        let diff = coef * (emb[[a, k]] - emb[[b, k]]);
        grads[[a, k]] += diff;
        grads[[b, k]] -= diff;
    }
}

fn dist(emb: ArrayView2<'_, f64>, a: usize, b: usize) -> f64 {
    l2_distance(emb.row(a), emb.row(b))
}

/// Triplet hinge `mean_T max(0, m_j + d(a, p) - d(a, n))`.
pub fn crl_relative(
    triplets: &TripletSet,
    embeddings: &[ArrayView2<'_, f64>],
    margins: &MarginSpec,
) -> LossBundle {
    let mut grads = zeros_like(embeddings);
    let mut diagnostics = LossDiagnostics {
        triplets: triplets.triplets.len(),
        ..Default::default()
    };
    if triplets.triplets.is_empty() {
        return LossBundle {
            value: 0.0,
            grad_logits: None,
            grad_embeddings: Some(grads),
            diagnostics,
        };
    }
    let inv = 1.0 / triplets.triplets.len() as f64;
    let mut value = 0.0;
    for t in &triplets.triplets {
        let emb = embeddings[t.attr];
        let d_ap = dist(emb, t.anchor, t.positive);
        let d_an = dist(emb, t.anchor, t.negative);
        let slack = margins.per_attr[t.attr] + d_ap - d_an;
        if slack > 0.0 {
            value += slack;
            diagnostics.active_triplets += 1;
            add_distance_grad(&mut grads[t.attr], emb, t.anchor, t.positive, d_ap, inv);
            add_distance_grad(&mut grads[t.attr], emb, t.anchor, t.negative, d_an, -inv);
        }
    }
    value *= inv;
    diagnostics.crl = value;
    LossBundle {
        value,
        grad_logits: None,
        grad_embeddings: Some(grads),
        diagnostics,
    }
}

/// Contrastive form `0.5 * (mean_{P+} d^2 + mean_{P-} max(m_apc - d, 0)^2)`.
pub fn crl_absolute(pairs: &PairSet, embeddings: &[ArrayView2<'_, f64>], m_apc: f64) -> LossBundle {
    let mut grads = zeros_like(embeddings);
    let mut value = 0.0;
    if !pairs.positive.is_empty() {
        let inv = 1.0 / pairs.positive.len() as f64;
        for p in &pairs.positive {
            let emb = embeddings[p.attr];
            let d = dist(emb, p.anchor, p.other);
            value += 0.5 * inv * d * d;
            // d(0.5 d^2)/da = (a - b)
            add_distance_grad(&mut grads[p.attr], emb, p.anchor, p.other, d, inv * d);
        }
    }
    if !pairs.negative.is_empty() {
        let inv = 1.0 / pairs.negative.len() as f64;
        for p in &pairs.negative {
            let emb = embeddings[p.attr];
            let d = dist(emb, p.anchor, p.other);
            let gap = m_apc - d;
            if gap > 0.0 {
                value += 0.5 * inv * gap * gap;
                add_distance_grad(&mut grads[p.attr], emb, p.anchor, p.other, d, -inv * gap);
            }
        }
    }
    LossBundle {
        value,
        grad_logits: None,
        grad_embeddings: Some(grads),
        diagnostics: LossDiagnostics {
            crl: value,
            positive_pairs: pairs.positive.len(),
            negative_pairs: pairs.negative.len(),
            ..Default::default()
        },
    }
}

/// `(lower_bin, weight_upper)` as produced by [`HistogramSpec::locate`].
pub type BinLocation = (usize, f64);

/// Soft histogram of a distance multiset. Returns the normalised histogram
/// and, per distance, its bin location (`None` when clamped).
pub fn soft_histogram(distances: &[f64], hist: &HistogramSpec) -> (Vec<f64>, Vec<Option<BinLocation>>, usize) {
    let mut h = vec![0.0; hist.bins];
    let mut clamped = 0;
    if distances.is_empty() {
        return (h, Vec::new(), 0);
    }
    let inv = 1.0 / distances.len() as f64;
    let locs = distances
        .iter()
        .map(|&d| {
            let loc = hist.locate(d);
            let (t, w) = loc.unwrap_or_else(|| {
                clamped += 1;
                let edge = if d < hist.min { hist.min } else { hist.max };
                hist.locate(edge).expect("range edge is in range")
            });
            h[t] += inv * (1.0 - w);
            h[t + 1] += inv * w;
            loc
        })
        .collect();
    (h, locs, clamped)
}

/// Histogram overlap `sum_t h+_t * sum_{k<=t} h-_k`: the binned probability
/// that a random negative pair is no farther apart than a random positive one.
pub fn crl_distribution(pairs: &PairSet, embeddings: &[ArrayView2<'_, f64>], hist: &HistogramSpec) -> LossBundle {
    let mut grads = zeros_like(embeddings);
    let mut diagnostics = LossDiagnostics {
        positive_pairs: pairs.positive.len(),
        negative_pairs: pairs.negative.len(),
        ..Default::default()
    };
    if pairs.positive.is_empty() || pairs.negative.is_empty() {
        diagnostics.empty_pair_set = true;
        return LossBundle {
            value: 0.0,
            grad_logits: None,
            grad_embeddings: Some(grads),
            diagnostics,
        };
    }
    let distances = |set: &[Pair]| -> Vec<f64> {
        set.iter().map(|p| dist(embeddings[p.attr], p.anchor, p.other)).collect()
    };
    let d_pos = distances(&pairs.positive);
    let d_neg = distances(&pairs.negative);
    let (h_pos, loc_pos, c_pos) = soft_histogram(&d_pos, hist);
    let (h_neg, loc_neg, c_neg) = soft_histogram(&d_neg, hist);
    diagnostics.clamped_distances = c_pos + c_neg;

    // Both histograms have unit mass and it does not depend on the distances.
    // Dividing by the summed mass removes rounding so separated sets score
    // exactly 0 or 1.
    let mut cdf_neg = vec![0.0; hist.bins];
    let mut acc = 0.0;
    for t in 0..hist.bins {
        acc += h_neg[t];
        cdf_neg[t] = acc;
    }
    let mass_neg = acc;
    cdf_neg.iter_mut().for_each(|c| *c /= mass_neg);
    let mass_pos: f64 = h_pos.iter().sum();
    // d value / d h-_k = sum_{t >= k} h+_t
    let mut tail_pos = vec![0.0; hist.bins];
    let mut acc = 0.0;
    for t in (0..hist.bins).rev() {
        acc += h_pos[t];
        tail_pos[t] = acc / (mass_pos * mass_neg);
    }
    let value = h_pos.iter().zip(&cdf_neg).map(|(p, c)| p * c).sum::<f64>() / mass_pos;
    let dvalue_dh_pos: Vec<f64> = cdf_neg.iter().map(|c| c / mass_pos).collect();

    // dh_t/dd = -1/step for the lower bin, +1/step for the upper.
    let inv_step = 1.0 / hist.step();
    let mut backprop = |set: &[Pair], locs: &[Option<BinLocation>], dists: &[f64], dvalue_dh: &[f64]| {
        let inv = 1.0 / set.len() as f64;
        for ((p, loc), &d) in set.iter().zip(locs).zip(dists) {
            if let Some((t, _)) = *loc {
                let dvalue_dd = inv * inv_step * (dvalue_dh[t + 1] - dvalue_dh[t]);
                add_distance_grad(&mut grads[p.attr], embeddings[p.attr], p.anchor, p.other, d, dvalue_dd);
            }
        }
    };
    backprop(&pairs.positive, &loc_pos, &d_pos, &dvalue_dh_pos);
    backprop(&pairs.negative, &loc_neg, &d_neg, &tail_pos);

    diagnostics.crl = value;
    LossBundle {
        value,
        grad_logits: None,
        grad_embeddings: Some(grads),
        diagnostics,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrlVariant {
    /// Plain cross-entropy; mining is skipped.
    #[default]
    #[serde(alias = "ce")]
    None,
    #[serde(rename = "crl-r", alias = "relative")]
    Relative,
    #[serde(rename = "crl-a", alias = "absolute")]
    Absolute,
    #[serde(rename = "crl-d", alias = "distribution")]
    Distribution,
}

impl std::str::FromStr for CrlVariant {
    type Err = CrlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "none" => Ok(CrlVariant::None),
            "crl-r" | "relative" => Ok(CrlVariant::Relative),
            "crl-a" | "absolute" => Ok(CrlVariant::Absolute),
            "crl-d" | "distribution" => Ok(CrlVariant::Distribution),
            other => Err(CrlError::Config(format!(
                "unknown loss `{other}` (expected ce|crl-r|crl-a|crl-d)"
            ))),
        }
    }
}

impl std::fmt::Display for CrlVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CrlVariant::None => "ce",
            CrlVariant::Relative => "crl-r",
            CrlVariant::Absolute => "crl-a",
            CrlVariant::Distribution => "crl-d",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub variant: CrlVariant,
    pub mining: MiningMode,
    pub k: usize,
    pub margins: MarginSpec,
    pub histogram: HistogramSpec,
    /// Multiplier on the rectification term; 1 gives the plain sum.
    pub crl_weight: f64,
}

/// Everything mining produced for one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinedBatch {
    pub profile: BatchProfile,
    pub anchors: Vec<Anchor>,
    pub hard: HardSets,
    pub triplets: TripletSet,
    pub pairs: PairSet,
}

pub fn mine_batch(
    view: &BatchView<'_>,
    labels: ArrayView2<'_, usize>,
    schema: &AttributeSchema,
    mode: MiningMode,
    k: usize,
) -> Result<MinedBatch> {
    if k == 0 {
        return Err(CrlError::Config("mining depth K must be at least 1".into()));
    }
    let profile = profile_batch(labels, schema, labels.nrows())?;
    let hard = match mode {
        MiningMode::Class => mine_class_level(&profile, labels, view, k)?,
        MiningMode::Instance => mine_instance_level(&profile, labels, view, k)?,
    };
    let anchors = anchors(&profile, labels);
    let triplets = build_triplets(&hard, &anchors);
    let pairs = build_pairs(&hard, &anchors);
    Ok(MinedBatch {
        profile,
        anchors,
        hard,
        triplets,
        pairs,
    })
}

/// Rectification term on already-mined sets: per-attribute losses averaged
/// over the attributes that produced triplets (or pairs).
pub fn crl_term(
    mined: &MinedBatch,
    view: &BatchView<'_>,
    config: &LossConfig,
) -> LossBundle {
    let n_attr = view.n_attr();
    let mut grads = zeros_like(&view.embeddings);
    let mut diagnostics = LossDiagnostics::default();
    let mut terms = Vec::new();
    for attr in 0..n_attr {
        let bundle = match config.variant {
            CrlVariant::None => continue,
            CrlVariant::Relative => {
                let subset = TripletSet {
                    triplets: mined.triplets.triplets.iter().copied().filter(|t| t.attr == attr).collect(),
                };
                if subset.triplets.is_empty() {
                    continue;
                }
                crl_relative(&subset, &view.embeddings, &config.margins)
            }
            CrlVariant::Absolute | CrlVariant::Distribution => {
                let keep = |ps: &[Pair]| ps.iter().copied().filter(|p| p.attr == attr).collect();
                let subset = PairSet {
                    positive: keep(&mined.pairs.positive),
                    negative: keep(&mined.pairs.negative),
                };
                if subset.is_empty() {
                    continue;
                }
                if config.variant == CrlVariant::Absolute {
                    crl_absolute(&subset, &view.embeddings, config.margins.apc)
                } else {
                    crl_distribution(&subset, &view.embeddings, &config.histogram)
                }
            }
        };
        terms.push(bundle);
    }
    let scale = if terms.is_empty() { 0.0 } else { config.crl_weight / terms.len() as f64 };
    let mut value = 0.0;
    for b in &terms {
        value += b.value;
        for (g, bg) in grads.iter_mut().zip(b.grad_embeddings.as_ref().expect("crl grads")) {
            g.scaled_add(scale, bg);
        }
        let d = &b.diagnostics;
        diagnostics.triplets += d.triplets;
        diagnostics.active_triplets += d.active_triplets;
        diagnostics.positive_pairs += d.positive_pairs;
        diagnostics.negative_pairs += d.negative_pairs;
        diagnostics.clamped_distances += d.clamped_distances;
        diagnostics.empty_pair_set |= d.empty_pair_set;
    }
    value *= scale;
    diagnostics.crl = value;
    diagnostics.crl_attributes = terms.len();
    LossBundle {
        value,
        grad_logits: None,
        grad_embeddings: Some(grads),
        diagnostics,
    }
}

/// `l_bln = l_ce + l_crl`. Returns the mined sets alongside the loss; with
/// [`CrlVariant::None`] nothing is mined and the bundle is the plain
/// cross-entropy bundle.
pub fn combined_loss(
    view: &BatchView<'_>,
    labels: ArrayView2<'_, usize>,
    schema: &AttributeSchema,
    config: &LossConfig,
) -> Result<(LossBundle, Option<MinedBatch>)> {
    let ce = cross_entropy(view, labels)?;
    combine_with(ce, view, labels, schema, config)
}

/// Adds the configured rectification term to an existing classification
/// bundle (plain or weighted cross-entropy).
pub fn combine_with(
    ce: LossBundle,
    view: &BatchView<'_>,
    labels: ArrayView2<'_, usize>,
    schema: &AttributeSchema,
    config: &LossConfig,
) -> Result<(LossBundle, Option<MinedBatch>)> {
    if config.variant == CrlVariant::None {
        return Ok((ce, None));
    }
    let mined = mine_batch(view, labels, schema, config.mining, config.k)?;
    let crl = crl_term(&mined, view, config);
    let mut diagnostics = crl.diagnostics;
    diagnostics.ce = ce.value;
    Ok((
        LossBundle {
            value: ce.value + crl.value,
            grad_logits: ce.grad_logits,
            grad_embeddings: crl.grad_embeddings,
            diagnostics,
        },
        Some(mined),
    ))
}

/// Exact `P(d_neg <= d_pos)` over all positive/negative distance pairs.
pub fn exhaustive_overlap(pos: ArrayView1<'_, f64>, neg: ArrayView1<'_, f64>) -> f64 {
    let hits: usize = pos
        .iter()
        .map(|&p| neg.iter().filter(|&&n| n <= p).count())
        .sum();
    hits as f64 / (pos.len() * neg.len()) as f64
}
