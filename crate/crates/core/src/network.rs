//! Multi-branch dense classifier.
//!
//! ```text
//! input (d) -> [dense + relu] * trunk -> per attribute j:
//!     branch_j: dense + relu -> x_j (branch_dim)
//!     head_j:   dense        -> logits_j (|Z_j|) -> softmax
//! ```
//!
//! The mining and rectification losses work on `x_j / |x_j|` (the
//! "embedding"); the classifier head reads the raw `x_j`. With
//! `normalize_features = false` the embedding is `x_j` itself.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::datagen::{AttributeSchema, ByteReader};
use crate::error::{CrlError, Result};
use crate::rng::{seeded, STREAM_INIT};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CRLC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Norms below this are clamped before normalisation.
const NORM_FLOOR: f64 = 1e-12;

fn default_branch_dim() -> usize {
    64
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub trunk_layer_sizes: Vec<usize>,
    #[serde(default = "default_branch_dim")]
    pub branch_dim: usize,
    pub schema: AttributeSchema,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub normalize_features: bool,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(CrlError::Config("feature_dim must be at least 1".into()));
        }
        if self.trunk_layer_sizes.is_empty() {
            return Err(CrlError::Config("trunk_layer_sizes must not be empty".into()));
        }
        if let Some(i) = self.trunk_layer_sizes.iter().position(|&w| w == 0) {
            return Err(CrlError::Config(format!("trunk layer {i} has zero width")));
        }
        if self.branch_dim == 0 {
            return Err(CrlError::Config("branch_dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fully connected layer, `weight` is `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    fn forward(&self, input: &Array2<f64>) -> Array2<f64> {
        let mut z = input.dot(&self.weight.t());
        z += &self.bias;
        z
    }

    fn shape(&self) -> (usize, usize) {
        self.weight.dim()
    }
}

/// Trunk, branch and head layers. Used for parameters, gradients and
/// momentum buffers alike.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub trunk: Vec<Dense>,
    pub branches: Vec<Dense>,
    pub heads: Vec<Dense>,
}

impl LayerStack {
    fn zeros(config: &ModelConfig) -> Self {
        let mut trunk = Vec::with_capacity(config.trunk_layer_sizes.len());
        let mut fan_in = config.feature_dim;
        for &w in &config.trunk_layer_sizes {
            trunk.push(Dense::zeros(w, fan_in));
            fan_in = w;
        }
        let n_attr = config.schema.n_attr();
        let branches = (0..n_attr)
            .map(|_| Dense::zeros(config.branch_dim, fan_in))
            .collect();
        let heads = (0..n_attr)
            .map(|j| Dense::zeros(config.schema.cardinality(j), config.branch_dim))
            .collect();
        Self {
            trunk,
            branches,
            heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |layers: &[Dense]| -> Vec<Dense> {
            layers
                .iter()
                .map(|d| {
                    let (o, i) = d.shape();
                    Dense::zeros(o, i)
                })
                .collect()
        };
        Self {
            trunk: z(&self.trunk),
            branches: z(&self.branches),
            heads: z(&self.heads),
        }
    }

    /// Layers in canonical order: trunk, branches, heads.
    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain(&self.branches).chain(&self.heads)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk
            .iter_mut()
            .chain(self.branches.iter_mut())
            .chain(self.heads.iter_mut())
    }

    /// Every scalar in canonical order (per layer: weight row-major, then bias).
    pub fn scalars(&self) -> impl Iterator<Item = &f64> {
        self.layers().flat_map(|d| d.weight.iter().chain(d.bias.iter()))
    }

    pub fn scalars_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers_mut()
            .flat_map(|d| d.weight.iter_mut().chain(d.bias.iter_mut()))
    }

    pub fn n_scalars(&self) -> usize {
        self.layers().map(|d| d.weight.len() + d.bias.len()).sum()
    }

    fn same_shape(&self, other: &LayerStack) -> bool {
        self.trunk.len() == other.trunk.len()
            && self.branches.len() == other.branches.len()
            && self.heads.len() == other.heads.len()
            && self.layers().zip(other.layers()).all(|(a, b)| a.shape() == b.shape())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub layers: LayerStack,
}

pub type Gradients = LayerStack;

/// He-style uniform fan-in init, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
/// biases zero.
pub fn init_params(config: &ModelConfig) -> Result<Parameters> {
    config.validate()?;
    let mut layers = LayerStack::zeros(config);
    let mut rng = seeded(config.init_seed, STREAM_INIT);
    for layer in layers.layers_mut() {
        let fan_in = layer.weight.ncols() as f64;
        let limit = (6.0 / fan_in).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        layer.weight.mapv_inplace(|_| dist.sample(&mut rng));
    }
    Ok(Parameters {
        config: config.clone(),
        layers,
    })
}

/// Per-attribute activations of one batch.
#[derive(Clone, Debug)]
pub struct HeadCache {
    pub branch_pre: Array2<f64>,
    /// `x_j`: rectified branch output, read by the classifier.
    pub features: Array2<f64>,
    /// Row norms of `features` (after flooring).
    pub norms: Array1<f64>,
    /// Unit-norm rows of `features`, or `features` in raw mode.
    pub embeddings: Array2<f64>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub input: Array2<f64>,
    pub trunk_pre: Vec<Array2<f64>>,
    pub trunk_out: Vec<Array2<f64>>,
    pub heads: Vec<HeadCache>,
    pub normalized: bool,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    pub fn view(&self) -> BatchView<'_> {
        BatchView {
            probs: self.heads.iter().map(|h| h.probs.view()).collect(),
            embeddings: self.heads.iter().map(|h| h.embeddings.view()).collect(),
        }
    }
}

/// What mining and the losses read from a forward pass: per-attribute class
/// probabilities (`n x |Z_j|`) and embeddings (`n x branch_dim`).
#[derive(Clone, Debug)]
pub struct BatchView<'a> {
    pub probs: Vec<ArrayView2<'a, f64>>,
    pub embeddings: Vec<ArrayView2<'a, f64>>,
}

impl BatchView<'_> {
    pub fn batch_size(&self) -> usize {
        self.probs.first().map_or(0, |p| p.nrows())
    }

    pub fn n_attr(&self) -> usize {
        self.probs.len()
    }

    /// Predicted class of sample `i` for attribute `attr`.
    pub fn predicted(&self, attr: usize, i: usize) -> usize {
        argmax_lowest(self.probs[attr].row(i).iter().copied())
    }
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax_lowest(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (k, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = k;
            best_v = v;
        }
    }
    best
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v.max(0.0))
}

fn relu_backward(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    Zip::from(grad).and(pre).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
}

pub fn forward(params: &Parameters, batch: ArrayView2<'_, f64>) -> Result<ForwardCache> {
    let config = &params.config;
    if batch.nrows() == 0 {
        return Err(CrlError::Contract("forward called with an empty batch".into()));
    }
    if batch.ncols() != config.feature_dim {
        return Err(CrlError::Contract(format!(
            "batch has {} features, model expects {}",
            batch.ncols(),
            config.feature_dim
        )));
    }
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(CrlError::NumericInput("non-finite value in batch features".into()));
    }
    let input = batch.to_owned();
    let mut trunk_pre = Vec::with_capacity(params.layers.trunk.len());
    let mut trunk_out: Vec<Array2<f64>> = Vec::with_capacity(params.layers.trunk.len());
    for layer in &params.layers.trunk {
        let z = layer.forward(trunk_out.last().unwrap_or(&input));
        trunk_out.push(relu(&z));
        trunk_pre.push(z);
    }
    let shared = trunk_out.last().expect("non-empty trunk");
    let heads = params
        .layers
        .branches
        .iter()
        .zip(&params.layers.heads)
        .map(|(branch, head)| {
            let branch_pre = branch.forward(shared);
            let features = relu(&branch_pre);
            let (norms, embeddings) = if config.normalize_features {
                let norms = features.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(NORM_FLOOR));
                let emb = &features / &norms.view().insert_axis(Axis(1));
                (norms, emb)
            } else {
                (Array1::ones(features.nrows()), features.clone())
            };
            let logits = head.forward(&features);
            let probs = softmax_rows(&logits);
            HeadCache {
                branch_pre,
                features,
                norms,
                embeddings,
                logits,
                probs,
            }
        })
        .collect();
    Ok(ForwardCache {
        input,
        trunk_pre,
        trunk_out,
        heads,
        normalized: config.normalize_features,
    })
}

fn check_shapes(
    name: &str,
    grads: &[Array2<f64>],
    expected: impl Iterator<Item = (usize, usize)>,
) -> Result<()> {
    let expected: Vec<_> = expected.collect();
    if grads.len() != expected.len() {
        return Err(CrlError::Contract(format!(
            "{name}: {} tensors for {} attributes",
            grads.len(),
            expected.len()
        )));
    }
    for (j, (g, e)) in grads.iter().zip(expected).enumerate() {
        if g.dim() != e {
            return Err(CrlError::Contract(format!(
                "{name}[{j}] has shape {:?}, expected {e:?}",
                g.dim()
            )));
        }
    }
    Ok(())
}

/// Backpropagates upstream gradients on the logits and (optionally) on the
/// embeddings through heads, normalisation, branches and the shared trunk.
pub fn backward(
    params: &Parameters,
    cache: &ForwardCache,
    grad_logits: &[Array2<f64>],
    grad_embeddings: Option<&[Array2<f64>]>,
) -> Result<Gradients> {
    check_shapes("grad_logits", grad_logits, cache.heads.iter().map(|h| h.logits.dim()))?;
    if let Some(ge) = grad_embeddings {
        check_shapes("grad_embeddings", ge, cache.heads.iter().map(|h| h.embeddings.dim()))?;
    }
    let mut grads = params.layers.zeros_like();
    let shared = cache.trunk_out.last().expect("non-empty trunk");
    let mut grad_shared = Array2::<f64>::zeros(shared.dim());

    for (j, hc) in cache.heads.iter().enumerate() {
        let head = &params.layers.heads[j];
        let gl = &grad_logits[j];
        grads.heads[j].weight = gl.t().dot(&hc.features);
        grads.heads[j].bias = gl.sum_axis(Axis(0));
        let mut gx = gl.dot(&head.weight);
        if let Some(ge) = grad_embeddings {
            let gu = &ge[j];
            if cache.normalized {
                for i in 0..gx.nrows() {
                    let u = hc.embeddings.row(i);
                    let g = gu.row(i);
                    let r = hc.norms[i];
                    let proj = u.dot(&g);
                    let mut row = gx.row_mut(i);
                    if r > NORM_FLOOR {
                        Zip::from(&mut row).and(&u).and(&g).for_each(|o, &uk, &gk| {
                            *o += (gk - uk * proj) / r;
                        });
                    } else {
                        row.scaled_add(1.0 / NORM_FLOOR, &g);
                    }
                }
            } else {
                gx += gu;
            }
        }
        relu_backward(&mut gx, &hc.branch_pre);
        let branch = &params.layers.branches[j];
        grads.branches[j].weight = gx.t().dot(shared);
        grads.branches[j].bias = gx.sum_axis(Axis(0));
        grad_shared += &gx.dot(&branch.weight);
    }

    let mut g = grad_shared;
    for l in (0..params.layers.trunk.len()).rev() {
        relu_backward(&mut g, &cache.trunk_pre[l]);
        let prev = if l == 0 { &cache.input } else { &cache.trunk_out[l - 1] };
        grads.trunk[l].weight = g.t().dot(prev);
        grads.trunk[l].bias = g.sum_axis(Axis(0));
        if l > 0 {
            g = g.dot(&params.layers.trunk[l].weight);
        }
    }
    Ok(grads)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub velocity: LayerStack,
    pub hyper: OptimizerConfig,
}

impl OptimState {
    pub fn new(params: &Parameters, hyper: OptimizerConfig) -> Self {
        Self {
            velocity: params.layers.zeros_like(),
            hyper,
        }
    }
}

/// `v <- momentum * v - lr * (g + weight_decay * w); w <- w + v`, applied to
/// weights and biases alike.
pub fn sgd_step(params: &mut Parameters, grads: &Gradients, state: &mut OptimState) -> Result<()> {
    if !params.layers.same_shape(grads) || !params.layers.same_shape(&state.velocity) {
        return Err(CrlError::Contract("gradient/velocity shapes do not match parameters".into()));
    }
    let OptimizerConfig {
        lr,
        momentum,
        weight_decay,
    } = state.hyper;
    for ((w, g), v) in params
        .layers
        .scalars_mut()
        .zip(grads.scalars())
        .zip(state.velocity.scalars_mut())
    {
        *v = momentum * *v - lr * (g + weight_decay * *w);
        *w += *v;
    }
    Ok(())
}

/// Argmax label per sample and attribute (ties to the lowest class index).
pub fn predict(params: &Parameters, batch: ArrayView2<'_, f64>) -> Result<Array2<usize>> {
    let cache = forward(params, batch)?;
    let n = cache.batch_size();
    let mut out = Array2::zeros((n, cache.heads.len()));
    for (j, hc) in cache.heads.iter().enumerate() {
        for i in 0..n {
            out[[i, j]] = argmax_lowest(hc.probs.row(i).iter().copied());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub optim: OptimState,
    /// Number of completed epochs.
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    optimizer: OptimizerConfig,
    epoch: usize,
}

/// `CRLC | version u16 | header_len u32 | header JSON | params f64* | velocity f64*`
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader {
        model: ckpt.params.config.clone(),
        optimizer: ckpt.optim.hyper,
        epoch: ckpt.epoch,
    })?;
    let n = ckpt.params.layers.n_scalars();
    let mut buf = Vec::with_capacity(10 + header.len() + 16 * n);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in ckpt.params.layers.scalars().chain(ckpt.optim.velocity.scalars()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    let bad = |offset: u64, reason: String| CrlError::MalformedHeader { offset, reason };
    if bytes.len() < 4 || r.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad(0, "bad magic, expected CRLC".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(4, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)
        .map_err(|e| bad(10, format!("invalid header: {e}")))?;
    header.model.validate().map_err(|e| bad(10, e.to_string()))?;
    let mut layers = LayerStack::zeros(&header.model);
    let mut velocity = layers.clone();
    for v in layers.scalars_mut().chain(velocity.scalars_mut()) {
        *v = r.f64()?;
    }
    if r.remaining() != 0 {
        return Err(bad(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    Ok(Checkpoint {
        params: Parameters {
            config: header.model,
            layers,
        },
        optim: OptimState {
            velocity,
            hyper: header.optimizer,
        },
        epoch: header.epoch,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| CrlError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CrlError::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn config(cards: Vec<usize>, branch_dim: usize) -> ModelConfig {
        ModelConfig {
            feature_dim: 8,
            trunk_layer_sizes: vec![12, 10],
            branch_dim,
            schema: AttributeSchema::new(cards).unwrap(),
            activation: Activation::Relu,
            normalize_features: true,
            init_seed: 3,
        }
    }

    fn batch(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, 8), |(i, k)| ((i * 7 + k * 3) % 11) as f64 / 5.0 - 1.0)
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let cfg = config(vec![2], 64);
        let a = init_params(&cfg).unwrap();
        assert_eq!(a, init_params(&cfg).unwrap());
        assert_eq!(a.layers.heads[0].weight.dim(), (2, 64));
        assert!(a.layers.layers().all(|d| d.bias.iter().all(|&b| b == 0.0)));
        let other = ModelConfig { init_seed: 4, ..cfg };
        assert_ne!(a.layers, init_params(&other).unwrap().layers);
    }

    #[test]
    fn zero_width_trunk_is_rejected() {
        let mut cfg = config(vec![2], 4);
        cfg.trunk_layer_sizes = vec![4, 0];
        assert!(matches!(init_params(&cfg), Err(CrlError::Config(_))));
        cfg.trunk_layer_sizes = vec![];
        assert!(init_params(&cfg).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut p = init_params(&config(vec![2, 5], 6)).unwrap();
        for head in &mut p.layers.heads {
            head.weight.fill(0.0);
        }
        let cache = forward(&p, batch(4).view()).unwrap();
        assert!(cache.heads[0].probs.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(cache.heads[1].probs.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_matches_closed_form_and_is_shift_invariant() {
        let logits = array![[3f64.ln(), 0.0]];
        let p = softmax_rows(&logits);
        assert!((p[[0, 0]] - 0.75).abs() < 1e-15 && (p[[0, 1]] - 0.25).abs() < 1e-15);
        let shifted = softmax_rows(&(&logits + 123.0));
        assert!((&p - &shifted).iter().all(|d| d.abs() < 1e-15));
        let huge = softmax_rows(&array![[1000.0, 0.0]]);
        assert!(huge.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = init_params(&config(vec![2], 4)).unwrap();
        let mut b = batch(3);
        b[[1, 2]] = f64::NAN;
        assert!(matches!(forward(&p, b.view()), Err(CrlError::NumericInput(_))));
        assert!(matches!(
            forward(&p, Array2::zeros((2, 5)).view()),
            Err(CrlError::Contract(_))
        ));
    }

    #[test]
    fn probabilities_are_rows_summing_to_one() {
        let p = init_params(&config(vec![3, 2], 5)).unwrap();
        let cache = forward(&p, batch(6).view()).unwrap();
        for hc in &cache.heads {
            for row in hc.probs.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            for (row, f) in hc.embeddings.rows().into_iter().zip(hc.features.rows()) {
                if f.iter().any(|&v| v > 0.0) {
                    assert!((row.dot(&row) - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = init_params(&config(vec![3, 2], 5)).unwrap();
        let cache = forward(&p, batch(4).view()).unwrap();
        let gl: Vec<_> = cache.heads.iter().map(|h| Array2::zeros(h.logits.dim())).collect();
        let ge: Vec<_> = cache.heads.iter().map(|h| Array2::zeros(h.embeddings.dim())).collect();
        let g = backward(&p, &cache, &gl, Some(&ge)).unwrap();
        assert!(g.scalars().all(|&v| v == 0.0));
        assert!(matches!(
            backward(&p, &cache, &gl[..1], None),
            Err(CrlError::Contract(_))
        ));
    }

    #[test]
    fn sgd_plain_step_subtracts_gradient() {
        let mut p = init_params(&config(vec![2], 3)).unwrap();
        let before = p.clone();
        let mut g = p.layers.zeros_like();
        for (i, v) in g.scalars_mut().enumerate() {
            *v = (i % 5) as f64 * 0.1;
        }
        let mut st = OptimState::new(&p, OptimizerConfig { lr: 1.0, momentum: 0.0, weight_decay: 0.0 });
        sgd_step(&mut p, &g, &mut st).unwrap();
        for ((w1, w0), gv) in p.layers.scalars().zip(before.layers.scalars()).zip(g.scalars()) {
            assert_eq!(*w1, w0 - gv);
        }
    }

    #[test]
    fn momentum_carries_initial_velocity() {
        let mut p = init_params(&config(vec![2], 3)).unwrap();
        let before = p.clone();
        let g = p.layers.zeros_like();
        let mu = 0.9;
        let mut st = OptimState::new(&p, OptimizerConfig { lr: 0.1, momentum: mu, weight_decay: 0.0 });
        for v in st.velocity.scalars_mut() {
            *v = 0.5;
        }
        sgd_step(&mut p, &g, &mut st).unwrap();
        sgd_step(&mut p, &g, &mut st).unwrap();
        let expected = 0.5 * (mu + mu * mu);
        for (w1, w0) in p.layers.scalars().zip(before.layers.scalars()) {
            assert!((w1 - w0 - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_decay_shrinks_geometrically() {
        let mut p = init_params(&config(vec![2], 3)).unwrap();
        let before = p.clone();
        let g = p.layers.zeros_like();
        let (lr, wd) = (0.1, 0.5);
        let mut st = OptimState::new(&p, OptimizerConfig { lr, momentum: 0.0, weight_decay: wd });
        for _ in 0..3 {
            sgd_step(&mut p, &g, &mut st).unwrap();
        }
        let factor = (1.0 - lr * wd).powi(3);
        for (w1, w0) in p.layers.scalars().zip(before.layers.scalars()) {
            assert!((w1 - w0 * factor).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        assert_eq!(argmax_lowest([0.5, 0.5]), 0);
        assert_eq!(argmax_lowest([0.75, 0.25]), 0);
        assert_eq!(argmax_lowest([0.2, 0.4, 0.4]), 1);
        let mut p = init_params(&config(vec![2], 3)).unwrap();
        p.layers.heads[0].weight.fill(0.0);
        let labels = predict(&p, batch(5).view()).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_params(&config(vec![2, 4], 3)).unwrap();
        let mut optim = OptimState::new(&p, OptimizerConfig::default());
        for (i, v) in optim.velocity.scalars_mut().enumerate() {
            *v = i as f64 * 1e-3;
        }
        let ckpt = Checkpoint { params: p, optim, epoch: 7 };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(matches!(decode_checkpoint(b""), Err(CrlError::MalformedHeader { .. })));
    }
}
