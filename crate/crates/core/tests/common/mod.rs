//! Shared generators, brute-force references and checkers for the
//! integration tests. Everything here is written independently of the
//! library's selection and histogram code paths.
#![allow(dead_code)]

use crl_core::datagen::AttributeSchema;
use crl_core::losses::{
    crl_term, cross_entropy, mine_batch, CrlVariant, HistogramSpec, LossConfig, MarginSpec, MinedBatch,
};
use crl_core::mining::{l2_distance, BatchProfile, HardSet, HardSets, MiningMode, PairSet, TripletSet};
use crl_core::network::{backward, forward, init_params, softmax_rows, BatchView, ModelConfig, Parameters};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; avoids depending on the library's samplers.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---------------------------------------------------------------------------
// Brute-force mining reference

pub fn ref_histogram(labels: ArrayView2<'_, usize>, attr: usize, card: usize) -> Vec<usize> {
    let mut h = vec![0; card];
    for i in 0..labels.nrows() {
        h[labels[[i, attr]]] += 1;
    }
    h
}

/// Longest ascending-count prefix whose total is below half the batch.
pub fn ref_minority(h: &[usize], n_bs: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..h.len()).collect();
    // Stable sort keeps ascending class index among equal counts.
    order.sort_by(|&a, &b| h[a].cmp(&h[b]));
    let prefix: Vec<usize> = std::iter::once(0)
        .chain(order.iter().scan(0, |acc, &c| {
            *acc += h[c];
            Some(*acc)
        }))
        .collect();
    let m = (0..=order.len()).rev().find(|&m| 2 * prefix[m] < n_bs).unwrap_or(0);
    order[..m].to_vec()
}

/// Stable full sort of `(key, index)` pairs, then the first `k` indices.
fn full_sort_top(mut items: Vec<(f64, usize)>, k: usize, descending: bool) -> Vec<usize> {
    items.sort_by_key(|&(_, i)| i);
    if descending {
        items.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    } else {
        items.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    }
    items.into_iter().take(k).map(|(_, i)| i).collect()
}

fn ref_argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for c in 1..row.len() {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

/// Minority classes with at least two batch samples, by attribute then class.
fn ref_eligible(labels: ArrayView2<'_, usize>, schema: &AttributeSchema) -> Vec<(usize, usize, Vec<usize>)> {
    let n = labels.nrows();
    let mut out = Vec::new();
    for j in 0..schema.n_attr() {
        let h = ref_histogram(labels, j, schema.cardinality(j));
        let mut minority = ref_minority(&h, n);
        minority.sort_unstable();
        for c in minority.into_iter().filter(|&c| h[c] >= 2) {
            let members = (0..n).filter(|&i| labels[[i, j]] == c).collect();
            out.push((j, c, members));
        }
    }
    out
}

pub fn ref_class_level(labels: ArrayView2<'_, usize>, view: &BatchView<'_>, schema: &AttributeSchema, k: usize) -> Vec<HardSet> {
    let n = labels.nrows();
    ref_eligible(labels, schema)
        .into_iter()
        .map(|(j, c, members)| {
            let p = view.probs[j];
            let inside: Vec<(f64, usize)> = members.iter().map(|&i| (p[[i, c]], i)).collect();
            let outside: Vec<(f64, usize)> = (0..n).filter(|&i| labels[[i, j]] != c).map(|i| (p[[i, c]], i)).collect();
            HardSet {
                attr: j,
                class: c,
                anchor: None,
                positives: full_sort_top(inside, k, false),
                negatives: full_sort_top(outside, k, true),
            }
        })
        .collect()
}

pub fn ref_instance_level(labels: ArrayView2<'_, usize>, view: &BatchView<'_>, schema: &AttributeSchema, k: usize) -> Vec<HardSet> {
    let n = labels.nrows();
    let mut out = Vec::new();
    for (j, c, members) in ref_eligible(labels, schema) {
        let emb = view.embeddings[j];
        let d = |a: usize, b: usize| -> f64 {
            emb.row(a).iter().zip(emb.row(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        for &a in &members {
            let pos: Vec<(f64, usize)> = members
                .iter()
                .copied()
                .filter(|&i| i != a && ref_argmax(view.probs[j].row(i)) != c)
                .map(|i| (d(a, i), i))
                .collect();
            let neg: Vec<(f64, usize)> = (0..n).filter(|&i| labels[[i, j]] != c).map(|i| (d(a, i), i)).collect();
            out.push(HardSet {
                attr: j,
                class: c,
                anchor: Some(a),
                positives: full_sort_top(pos, k, true),
                negatives: full_sort_top(neg, k, false),
            });
        }
    }
    // Library order: attribute, then anchor sample.
    out.sort_by_key(|s| (s.attr, s.anchor));
    out
}

pub struct RandomBatch {
    pub schema: AttributeSchema,
    pub labels: Array2<usize>,
    pub probs: Vec<Array2<f64>>,
    pub embeddings: Vec<Array2<f64>>,
}

impl RandomBatch {
    pub fn view(&self) -> BatchView<'_> {
        BatchView {
            probs: self.probs.iter().map(|p| p.view()).collect(),
            embeddings: self.embeddings.iter().map(|e| e.view()).collect(),
        }
    }
}

/// Random batch with skewed labels and rows drawn partly from a small pool
/// so that score and distance ties are common.
pub fn random_batch(rng: &mut impl Rng) -> RandomBatch {
    let n = rng.random_range(2..=512usize);
    let n_attr = rng.random_range(1..=3usize);
    let cards: Vec<usize> = (0..n_attr).map(|_| rng.random_range(2..=5)).collect();
    let schema = AttributeSchema::new(cards.clone()).unwrap();
    let mut labels = Array2::zeros((n, n_attr));
    for (j, &card) in cards.iter().enumerate() {
        let weights: Vec<f64> = (0..card).map(|_| rng.random::<f64>().powi(3) + 1e-3).collect();
        let total: f64 = weights.iter().sum();
        for i in 0..n {
            let mut u = rng.random::<f64>() * total;
            let mut c = 0;
            while c + 1 < card && u >= weights[c] {
                u -= weights[c];
                c += 1;
            }
            labels[[i, j]] = c;
        }
    }
    let pooled = rng.random_bool(0.7);
    let mut probs = Vec::new();
    let mut embeddings = Vec::new();
    for &card in &cards {
        let dim = rng.random_range(2..=6);
        let pool_size = rng.random_range(1..=8);
        let logit_pool: Vec<Vec<f64>> = (0..pool_size)
            .map(|_| (0..card).map(|_| (rng.random_range(-4..=4) as f64) * 0.5).collect())
            .collect();
        let emb_pool: Vec<Vec<f64>> = (0..pool_size).map(|_| (0..dim).map(|_| normal(rng)).collect()).collect();
        let mut logits = Array2::zeros((n, card));
        let mut emb = Array2::zeros((n, dim));
        for i in 0..n {
            let from_pool = pooled && rng.random_bool(0.6);
            let p = rng.random_range(0..pool_size);
            for c in 0..card {
                logits[[i, c]] = if from_pool { logit_pool[p][c] } else { normal(rng) };
            }
            for k in 0..dim {
                emb[[i, k]] = if from_pool { emb_pool[p][k] } else { normal(rng) };
            }
            let norm = emb.row(i).dot(&emb.row(i)).sqrt().max(1e-12);
            emb.row_mut(i).mapv_inplace(|v| v / norm);
        }
        probs.push(softmax_rows(&logits));
        embeddings.push(emb);
    }
    RandomBatch {
        schema,
        labels,
        probs,
        embeddings,
    }
}

pub fn check_profile(profile: &BatchProfile, labels: ArrayView2<'_, usize>, schema: &AttributeSchema) -> Result<(), String> {
    let n = labels.nrows();
    for j in 0..schema.n_attr() {
        let h = ref_histogram(labels, j, schema.cardinality(j));
        let ap = &profile.attributes[j];
        if ap.histogram != h {
            return Err(format!("attr {j}: histogram {:?} vs {:?}", ap.histogram, h));
        }
        let mut got = ap.minority.clone();
        let mut want = ref_minority(&h, n);
        got.sort_unstable();
        want.sort_unstable();
        if got != want {
            return Err(format!("attr {j}: minority {got:?} vs reference {want:?} for counts {h:?}"));
        }
        let total: usize = got.iter().map(|&c| h[c]).sum();
        if 2 * total >= n {
            return Err(format!("attr {j}: minority total {total} not below half of {n}"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Finite differences

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error; components whose true size is
/// below it are judged on absolute error instead.
pub const FD_FLOOR: f64 = 1e-6;
/// Configurations within this distance of a non-differentiable point are
/// resampled.
pub const KINK_GUARD: f64 = 1e-4;
/// Minimum embedding distance of a mined pair: the distance's curvature
/// grows like `1 / d`, which spoils central differences near zero.
pub const DISTANCE_GUARD: f64 = 1e-2;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    CrossEntropy,
    Crl(CrlVariant),
    Combined(CrlVariant),
}

pub struct GradProblem {
    pub params: Parameters,
    pub x: Array2<f64>,
    pub labels: Array2<usize>,
    pub loss: LossConfig,
}

/// Small network and batch where every attribute has a two-sample minority.
pub fn random_grad_problem(rng: &mut impl Rng, variant: CrlVariant, mining: MiningMode) -> GradProblem {
    let d = rng.random_range(2..=16);
    let n = rng.random_range(5..=8);
    let cards: Vec<usize> = (0..2).map(|_| rng.random_range(2..=3)).collect();
    let schema = AttributeSchema::new(cards.clone()).unwrap();
    let mut labels = Array2::zeros((n, 2));
    for (j, &card) in cards.iter().enumerate() {
        let minority = rng.random_range(0..card);
        let others: Vec<usize> = (0..card).filter(|&c| c != minority).collect();
        let mut col: Vec<usize> = (0..n).map(|i| if i < 2 { minority } else { others[rng.random_range(0..others.len())] }).collect();
        // Keep the minority strictly below half with a unique smallest count.
        if card == 3 && col.iter().filter(|&&c| c == others[0]).count() < 3 {
            col[2..].fill(others[1]);
        }
        for i in (1..n).rev() {
            col.swap(i, rng.random_range(0..=i));
        }
        for (i, c) in col.into_iter().enumerate() {
            labels[[i, j]] = c;
        }
    }
    let config = ModelConfig {
        feature_dim: d,
        trunk_layer_sizes: vec![rng.random_range(3..=8)],
        branch_dim: rng.random_range(3..=6),
        schema: schema.clone(),
        activation: Default::default(),
        normalize_features: true,
        init_seed: rng.random(),
    };
    let mut params = init_params(&config).unwrap();
    for b in params.layers.layers_mut().map(|l| &mut l.bias) {
        b.mapv_inplace(|_| 0.1 * normal(rng));
    }
    let x = Array2::from_shape_fn((n, d), |_| normal(rng));
    let loss = LossConfig {
        variant,
        mining,
        k: rng.random_range(1..=3),
        margins: MarginSpec::from_schema(&schema, 1.0).unwrap(),
        histogram: HistogramSpec::new(51, 0.0, 2.0).unwrap(),
        crl_weight: 1.0,
    };
    GradProblem { params, x, labels, loss }
}

pub struct Evaluated {
    pub value: f64,
    pub mined: Option<MinedBatch>,
}

fn crl_only(mined: &MinedBatch, view: &BatchView<'_>, cfg: &LossConfig) -> crl_core::losses::LossBundle {
    crl_term(mined, view, cfg)
}

/// Loss value (and mined sets) at `params`.
pub fn eval_target(p: &GradProblem, params: &Parameters, target: GradTarget) -> Evaluated {
    let cache = forward(params, p.x.view()).unwrap();
    let view = cache.view();
    let schema = &params.config.schema;
    match target {
        GradTarget::CrossEntropy => Evaluated {
            value: cross_entropy(&view, p.labels.view()).unwrap().value,
            mined: None,
        },
        GradTarget::Crl(v) | GradTarget::Combined(v) => {
            let cfg = LossConfig { variant: v, ..p.loss.clone() };
            let mined = mine_batch(&view, p.labels.view(), schema, cfg.mining, cfg.k).unwrap();
            let mut value = crl_only(&mined, &view, &cfg).value;
            if matches!(target, GradTarget::Combined(_)) {
                value += cross_entropy(&view, p.labels.view()).unwrap().value;
            }
            Evaluated { value, mined: Some(mined) }
        }
    }
}

/// Analytic parameter gradient, flattened in canonical order.
pub fn analytic_grad(p: &GradProblem, target: GradTarget) -> Vec<f64> {
    let cache = forward(&p.params, p.x.view()).unwrap();
    let view = cache.view();
    let schema = &p.params.config.schema;
    let zeros_logits: Vec<Array2<f64>> = cache.heads.iter().map(|h| Array2::zeros(h.logits.dim())).collect();
    let (gl, ge) = match target {
        GradTarget::CrossEntropy => (cross_entropy(&view, p.labels.view()).unwrap().grad_logits.unwrap(), None),
        GradTarget::Crl(v) => {
            let cfg = LossConfig { variant: v, ..p.loss.clone() };
            let mined = mine_batch(&view, p.labels.view(), schema, cfg.mining, cfg.k).unwrap();
            (zeros_logits, crl_only(&mined, &view, &cfg).grad_embeddings)
        }
        GradTarget::Combined(v) => {
            let cfg = LossConfig { variant: v, ..p.loss.clone() };
            let (b, _) = crl_core::losses::combined_loss(&view, p.labels.view(), schema, &cfg).unwrap();
            (b.grad_logits.unwrap(), b.grad_embeddings)
        }
    };
    let g = backward(&p.params, &cache, &gl, ge.as_deref()).unwrap();
    g.scalars().copied().collect()
}

/// Why a configuration is unsuitable for differencing, if it is.
pub fn kink_reason(p: &GradProblem, target: GradTarget) -> Option<String> {
    let cache = forward(&p.params, p.x.view()).unwrap();
    let near = |a: &Array2<f64>| a.iter().any(|z| z.abs() < KINK_GUARD);
    if cache.trunk_pre.iter().any(near) || cache.heads.iter().any(|h| near(&h.branch_pre)) {
        return Some("relu pre-activation near zero".into());
    }
    if cache.heads.iter().any(|h| h.norms.iter().any(|&r| r < KINK_GUARD)) {
        return Some("branch feature norm near zero".into());
    }
    let variant = match target {
        GradTarget::CrossEntropy => return None,
        GradTarget::Crl(v) | GradTarget::Combined(v) => v,
    };
    let view = cache.view();
    let mined = mine_batch(&view, p.labels.view(), &p.params.config.schema, p.loss.mining, p.loss.k).unwrap();
    let d = |attr: usize, a: usize, b: usize| l2_distance(view.embeddings[attr].row(a), view.embeddings[attr].row(b));
    let pairs = mined.pairs.positive.iter().chain(&mined.pairs.negative);
    if pairs.into_iter().any(|q| d(q.attr, q.anchor, q.other) < DISTANCE_GUARD) {
        return Some("coincident embeddings".into());
    }
    match variant {
        CrlVariant::None => {}
        CrlVariant::Relative => {
            if mined.triplets.triplets.is_empty() {
                return Some("no triplets".into());
            }
            for t in &mined.triplets.triplets {
                let slack = p.loss.margins.per_attr[t.attr] + d(t.attr, t.anchor, t.positive) - d(t.attr, t.anchor, t.negative);
                if slack.abs() < KINK_GUARD {
                    return Some("hinge at zero".into());
                }
            }
        }
        CrlVariant::Absolute => {
            if mined.pairs.is_empty() {
                return Some("no pairs".into());
            }
            for q in &mined.pairs.negative {
                if (p.loss.margins.apc - d(q.attr, q.anchor, q.other)).abs() < KINK_GUARD {
                    return Some("margin at zero".into());
                }
            }
        }
        CrlVariant::Distribution => {
            if mined.pairs.positive.is_empty() || mined.pairs.negative.is_empty() {
                return Some("one-sided pairs".into());
            }
            let step = p.loss.histogram.step();
            for q in mined.pairs.positive.iter().chain(&mined.pairs.negative) {
                let pos = d(q.attr, q.anchor, q.other) / step;
                if (pos - pos.round()).abs() * step < KINK_GUARD {
                    return Some("distance on a bin centre".into());
                }
            }
        }
    }
    None
}

pub struct FdOutcome {
    pub max_rel_error: f64,
    /// (analytic, numeric) at the worst component.
    pub worst: (f64, f64),
    pub n_params: usize,
}

/// Central differences over every parameter; `None` when any perturbation
/// changes the mined sets.
pub fn fd_check(p: &GradProblem, target: GradTarget) -> Option<FdOutcome> {
    let base = eval_target(p, &p.params, target);
    let analytic = analytic_grad(p, target);
    let mut max_rel: f64 = 0.0;
    let mut worst = (0.0, 0.0);
    for (i, &a) in analytic.iter().enumerate() {
        let shifted = |delta: f64| {
            let mut q = p.params.clone();
            *q.layers.scalars_mut().nth(i).unwrap() += delta;
            eval_target(p, &q, target)
        };
        let (plus, minus) = (shifted(FD_STEP), shifted(-FD_STEP));
        if plus.mined != base.mined || minus.mined != base.mined {
            return None;
        }
        let numeric = (plus.value - minus.value) / (2.0 * FD_STEP);
        if rel_error(a, numeric) > max_rel {
            max_rel = rel_error(a, numeric);
            worst = (a, numeric);
        }
    }
    Some(FdOutcome {
        max_rel_error: max_rel,
        worst,
        n_params: analytic.len(),
    })
}

/// Gradient of a CRL loss with respect to the embeddings themselves, with
/// the triplets/pairs held fixed; returns the worst relative error.
pub fn embedding_fd(
    embeddings: &[Array2<f64>],
    f: &dyn Fn(&[ArrayView2<'_, f64>]) -> crl_core::losses::LossBundle,
) -> f64 {
    let views: Vec<_> = embeddings.iter().map(|e| e.view()).collect();
    let analytic = f(&views).grad_embeddings.unwrap();
    let mut worst: f64 = 0.0;
    for j in 0..embeddings.len() {
        for idx in 0..embeddings[j].len() {
            let value_at = |delta: f64| {
                let mut e = embeddings.to_vec();
                *e[j].iter_mut().nth(idx).unwrap() += delta;
                let v: Vec<_> = e.iter().map(|a| a.view()).collect();
                f(&v).value
            };
            let numeric = (value_at(FD_STEP) - value_at(-FD_STEP)) / (2.0 * FD_STEP);
            let a = *analytic[j].iter().nth(idx).unwrap();
            worst = worst.max(rel_error(a, numeric));
        }
    }
    worst
}

pub fn triplets_and_pairs(mined: &MinedBatch) -> (&TripletSet, &PairSet, &HardSets) {
    (&mined.triplets, &mined.pairs, &mined.hard)
}

// ---------------------------------------------------------------------------
// Histogram oracle

/// Exact fraction of (positive, negative) distance pairs with `neg <= pos`.
pub fn brute_overlap(pos: &[f64], neg: &[f64]) -> f64 {
    let mut hits = 0usize;
    for &p in pos {
        for &n in neg {
            if n <= p {
                hits += 1;
            }
        }
    }
    hits as f64 / (pos.len() * neg.len()) as f64
}

/// One anchor at the origin of a 2-d plane and one point per requested
/// distance on the first axis; returns embeddings plus the pair set.
pub fn pairs_at_distances(pos: &[f64], neg: &[f64]) -> (Array2<f64>, PairSet) {
    use crl_core::mining::Pair;
    let n = 1 + pos.len() + neg.len();
    let mut emb = Array2::zeros((n, 2));
    for (i, &d) in pos.iter().chain(neg).enumerate() {
        emb[[i + 1, 0]] = d;
    }
    let pair = |other| Pair { attr: 0, class: 1, anchor: 0, other };
    let set = PairSet {
        positive: (1..=pos.len()).map(pair).collect(),
        negative: (pos.len() + 1..n).map(pair).collect(),
    };
    (emb, set)
}
