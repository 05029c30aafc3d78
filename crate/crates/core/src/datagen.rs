//! Synthetic imbalanced multi-attribute datasets.
//!
//! Features are additive prototype mixtures: every attribute contributes the
//! prototype vector of its drawn class, and isotropic Gaussian noise is added
//! on top. Each attribute is therefore linearly recoverable in principle, so a
//! model that ignores a minority class does so because of the imbalance.
//!
//! Datasets persist in the little-endian `CRLD` binary format:
//!
//! ```text
//! "CRLD" | version u16 | n u64 | d u32 | n_attr u32 | cardinality u32 * n_attr
//! then per sample: d * f64 features, n_attr * u32 labels
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{CrlError, Result};
use crate::rng::{seeded, STREAM_PROTOTYPES, STREAM_SAMPLES, STREAM_SPLIT};

pub const DATASET_MAGIC: &[u8; 4] = b"CRLD";
pub const DATASET_VERSION: u16 = 1;

const PRIOR_TOLERANCE: f64 = 1e-9;

/// Number of attributes and the number of values each one can take.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct AttributeSchema {
    cardinalities: Vec<usize>,
}

impl AttributeSchema {
    pub fn new(cardinalities: Vec<usize>) -> Result<Self> {
        if cardinalities.is_empty() {
            return Err(CrlError::Config(
                "schema needs at least one attribute".into(),
            ));
        }
        if let Some((j, &c)) = cardinalities.iter().enumerate().find(|(_, &c)| c < 2) {
            return Err(CrlError::Config(format!(
                "attribute {j} has cardinality {c}; at least 2 required"
            )));
        }
        Ok(Self { cardinalities })
    }

    pub fn n_attr(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn cardinality(&self, attr: usize) -> usize {
        self.cardinalities[attr]
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    /// Checks one label row against the schema.
    pub fn check_labels(&self, labels: ArrayView1<'_, usize>) -> Result<()> {
        if labels.len() != self.n_attr() {
            return Err(CrlError::Contract(format!(
                "label row has {} entries, schema has {} attributes",
                labels.len(),
                self.n_attr()
            )));
        }
        for (j, (&label, &card)) in labels.iter().zip(&self.cardinalities).enumerate() {
            if label >= card {
                return Err(CrlError::Contract(format!(
                    "label {label} out of range for attribute {j} with cardinality {card}"
                )));
            }
        }
        Ok(())
    }
}

impl TryFrom<Vec<usize>> for AttributeSchema {
    type Error = CrlError;

    fn try_from(value: Vec<usize>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<AttributeSchema> for Vec<usize> {
    fn from(value: AttributeSchema) -> Self {
        value.cardinalities
    }
}

/// One sample in row form.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

/// Immutable collection of samples stored column-major by role: an `n x d`
/// feature matrix and an `n x n_attr` label matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    schema: AttributeSchema,
    features: Array2<f64>,
    labels: Array2<usize>,
}

impl Dataset {
    pub fn new(schema: AttributeSchema, features: Array2<f64>, labels: Array2<usize>) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(CrlError::Config("dataset must contain at least one sample".into()));
        }
        if features.ncols() == 0 {
            return Err(CrlError::Config("feature dimension must be at least 1".into()));
        }
        if labels.nrows() != n {
            return Err(CrlError::Contract(format!(
                "{} feature rows but {} label rows",
                n,
                labels.nrows()
            )));
        }
        if let Some(bad) = features.iter().position(|v| !v.is_finite()) {
            return Err(CrlError::NumericInput(format!(
                "non-finite feature in sample {}",
                bad / features.ncols()
            )));
        }
        for row in labels.rows() {
            schema.check_labels(row)?;
        }
        Ok(Self {
            schema,
            features,
            labels,
        })
    }

    pub fn from_samples(schema: AttributeSchema, samples: &[Sample]) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(CrlError::Config("dataset must contain at least one sample".into()));
        }
        let d = samples[0].features.len();
        let mut features = Array2::zeros((n, d));
        let mut labels = Array2::zeros((n, schema.n_attr()));
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != d {
                return Err(CrlError::Contract(format!(
                    "sample {i} has {} features, expected {d}",
                    s.features.len()
                )));
            }
            if s.labels.len() != schema.n_attr() {
                return Err(CrlError::Contract(format!(
                    "sample {i} has {} labels, expected {}",
                    s.labels.len(),
                    schema.n_attr()
                )));
            }
            features.row_mut(i).assign(&ArrayView1::from(&s.features[..]));
            labels.row_mut(i).assign(&ArrayView1::from(&s.labels[..]));
        }
        Self::new(schema, features, labels)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &Array2<usize> {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            features: self.features.row(i).to_vec(),
            labels: self.labels.row(i).to_vec(),
        }
    }

    /// Per-class sample counts of attribute `attr`.
    pub fn class_counts(&self, attr: usize) -> Vec<usize> {
        let mut counts = vec![0; self.schema.cardinality(attr)];
        for &label in self.labels.column(attr) {
            counts[label] += 1;
        }
        counts
    }

    /// Rows `indices` (in that order, duplicates allowed) as feature and
    /// label matrices.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Array2<usize>) {
        (
            self.features.select(Axis(0), indices),
            self.labels.select(Axis(0), indices),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (features, labels) = self.gather(indices);
        Dataset::new(self.schema.clone(), features, labels)
    }
}

/// Fully explicit generator description.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub schema: AttributeSchema,
    pub feature_dim: usize,
    /// One probability vector per attribute.
    pub priors: Vec<Vec<f64>>,
    /// One `cardinality x feature_dim` matrix per attribute.
    pub prototypes: Vec<Array2<f64>>,
    pub noise_sigma: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let n_attr = self.schema.n_attr();
        if self.feature_dim == 0 {
            return Err(CrlError::Config("feature_dim must be at least 1".into()));
        }
        if self.n_samples == 0 {
            return Err(CrlError::Config("n_samples must be at least 1".into()));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(CrlError::Config(format!(
                "noise_sigma must be finite and > 0, got {}",
                self.noise_sigma
            )));
        }
        if self.priors.len() != n_attr || self.prototypes.len() != n_attr {
            return Err(CrlError::Config(format!(
                "expected {n_attr} priors and prototype sets, got {} and {}",
                self.priors.len(),
                self.prototypes.len()
            )));
        }
        for j in 0..n_attr {
            let card = self.schema.cardinality(j);
            validate_prior(&self.priors[j], card, j)?;
            let protos = &self.prototypes[j];
            if protos.dim() != (card, self.feature_dim) {
                return Err(CrlError::Config(format!(
                    "attribute {j}: prototypes have shape {:?}, expected ({card}, {})",
                    protos.dim(),
                    self.feature_dim
                )));
            }
            if protos.iter().any(|v| !v.is_finite()) {
                return Err(CrlError::Config(format!("attribute {j}: non-finite prototype")));
            }
        }
        Ok(())
    }
}

fn validate_prior(prior: &[f64], card: usize, attr: usize) -> Result<()> {
    if prior.len() != card {
        return Err(CrlError::Config(format!(
            "attribute {attr}: prior has {} entries, cardinality is {card}",
            prior.len()
        )));
    }
    if prior.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(CrlError::Config(format!(
            "attribute {attr}: prior entries must be finite and non-negative"
        )));
    }
    let sum: f64 = prior.iter().sum();
    if (sum - 1.0).abs() > PRIOR_TOLERANCE {
        return Err(CrlError::Config(format!(
            "attribute {attr}: prior sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

pub fn generate_synthetic(spec: &GeneratorSpec) -> Result<Dataset> {
    spec.validate()?;
    let n_attr = spec.schema.n_attr();
    let d = spec.feature_dim;
    let mut rng = seeded(spec.seed, STREAM_SAMPLES);
    let samplers = spec
        .priors
        .iter()
        .map(|p| WeightedIndex::new(p).map_err(|e| CrlError::Config(format!("invalid prior: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| CrlError::Config(format!("invalid noise_sigma: {e}")))?;

    let mut features = Array2::zeros((spec.n_samples, d));
    let mut labels = Array2::zeros((spec.n_samples, n_attr));
    for i in 0..spec.n_samples {
        for (j, sampler) in samplers.iter().enumerate() {
            labels[[i, j]] = sampler.sample(&mut rng);
        }
        let mut row = features.row_mut(i);
        for j in 0..n_attr {
            row += &spec.prototypes[j].row(labels[[i, j]]);
        }
        for v in row.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    Dataset::new(spec.schema.clone(), features, labels)
}

/// One attribute of a [`SyntheticConfig`]: either explicit `priors`, or a
/// binary attribute given by its imbalance `ratio` (1:ratio).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeGen {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
}

impl AttributeGen {
    pub fn binary_ratio(ratio: f64) -> Self {
        Self {
            priors: None,
            ratio: Some(ratio),
        }
    }

    pub fn resolve_prior(&self) -> Result<Vec<f64>> {
        match (&self.priors, self.ratio) {
            (Some(p), None) => Ok(p.clone()),
            (None, Some(r)) if r >= 1.0 && r.is_finite() => {
                Ok(vec![r / (r + 1.0), 1.0 / (r + 1.0)])
            }
            (None, Some(r)) => Err(CrlError::Config(format!("ratio must be >= 1, got {r}"))),
            _ => Err(CrlError::Config(
                "each attribute needs exactly one of `priors` or `ratio`".into(),
            )),
        }
    }
}

/// Human-editable generator description; prototypes are drawn at random with
/// expected norm `prototype_scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub feature_dim: usize,
    pub n_samples: usize,
    pub noise_sigma: f64,
    pub prototype_scale: f64,
    pub seed: u64,
    pub attributes: Vec<AttributeGen>,
}

impl SyntheticConfig {
    pub fn to_spec(&self) -> Result<GeneratorSpec> {
        let priors = self
            .attributes
            .iter()
            .map(AttributeGen::resolve_prior)
            .collect::<Result<Vec<_>>>()?;
        let schema = AttributeSchema::new(priors.iter().map(Vec::len).collect())?;
        if self.feature_dim == 0 {
            return Err(CrlError::Config("feature_dim must be at least 1".into()));
        }
        if !(self.prototype_scale > 0.0 && self.prototype_scale.is_finite()) {
            return Err(CrlError::Config("prototype_scale must be finite and > 0".into()));
        }
        let coord = Normal::new(0.0, self.prototype_scale / (self.feature_dim as f64).sqrt())
            .map_err(|e| CrlError::Config(e.to_string()))?;
        let mut rng = seeded(self.seed, STREAM_PROTOTYPES);
        let prototypes = schema
            .cardinalities()
            .iter()
            .map(|&card| Array2::from_shape_fn((card, self.feature_dim), |_| coord.sample(&mut rng)))
            .collect();
        let spec = GeneratorSpec {
            schema,
            feature_dim: self.feature_dim,
            priors,
            prototypes,
            noise_sigma: self.noise_sigma,
            n_samples: self.n_samples,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Partition sizes for `n` items by largest-remainder rounding.
pub fn split_sizes(n: usize, fractions: &[f64]) -> Result<Vec<usize>> {
    if fractions.is_empty() {
        return Err(CrlError::Config("at least one split fraction required".into()));
    }
    if fractions.iter().any(|&f| !f.is_finite() || f <= 0.0) {
        return Err(CrlError::Config("split fractions must be finite and positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > PRIOR_TOLERANCE {
        return Err(CrlError::Config(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    // Largest fractional part first; earlier split wins ties.
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        sizes[k] += 1;
    }
    Ok(sizes)
}

/// Seeded disjoint partition of `ds`. Sizes follow [`split_sizes`].
pub fn split(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    let sizes = split_sizes(ds.len(), fractions)?;
    if let Some(k) = sizes.iter().position(|&s| s == 0) {
        return Err(CrlError::Config(format!(
            "split {k} would be empty for {} samples",
            ds.len()
        )));
    }
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    perm.shuffle(&mut seeded(seed, STREAM_SPLIT));
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        out.push(ds.subset(&perm[start..start + size])?);
        start += size;
    }
    Ok(out)
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let n_attr = ds.schema.n_attr();
    let d = ds.feature_dim();
    let mut buf = Vec::with_capacity(22 + 4 * n_attr + ds.len() * (8 * d + 4 * n_attr));
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(n_attr as u32).to_le_bytes());
    for &c in ds.schema.cardinalities() {
        buf.extend_from_slice(&(c as u32).to_le_bytes());
    }
    for (f, l) in ds.features.rows().into_iter().zip(ds.labels.rows()) {
        for v in f {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &a in l {
            buf.extend_from_slice(&(a as u32).to_le_bytes());
        }
    }
    buf
}

/// Little-endian reader that remembers its byte offset for error messages.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.remaining() < len {
            return Err(CrlError::Truncated {
                offset: self.offset(),
                needed: (len - self.remaining()) as u64,
            });
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    let header_err = |offset: u64, reason: &str| CrlError::MalformedHeader {
        offset,
        reason: reason.to_string(),
    };
    if bytes.len() < DATASET_MAGIC.len() {
        return Err(header_err(0, "file too short for magic bytes"));
    }
    if r.take(4)? != DATASET_MAGIC {
        return Err(header_err(0, "bad magic, expected CRLD"));
    }
    let version = r.u16().map_err(|_| header_err(r.offset(), "missing version"))?;
    if version != DATASET_VERSION {
        return Err(header_err(4, &format!("unsupported version {version}")));
    }
    let n = r.u64()? as usize;
    let d = r.u32()? as usize;
    let n_attr_offset = r.offset();
    let n_attr = r.u32()? as usize;
    if n == 0 || d == 0 || n_attr == 0 {
        return Err(header_err(6, "n, d and n_attr must all be positive"));
    }
    let mut cards = Vec::with_capacity(n_attr.min(1 << 16));
    for _ in 0..n_attr {
        let at = r.offset();
        let c = r.u32()? as usize;
        if c < 2 {
            return Err(header_err(at, &format!("cardinality {c} < 2")));
        }
        cards.push(c);
    }
    let schema = AttributeSchema::new(cards)
        .map_err(|e| header_err(n_attr_offset, &e.to_string()))?;

    let record = 8 * d + 4 * n_attr;
    let needed = n.checked_mul(record).ok_or_else(|| header_err(6, "sample count overflows"))?;
    if r.remaining() < needed {
        return Err(CrlError::Truncated {
            offset: r.offset() + (r.remaining() / record * record) as u64,
            needed: (needed - r.remaining()) as u64,
        });
    }
    let mut features = Array2::zeros((n, d));
    let mut labels = Array2::zeros((n, n_attr));
    for i in 0..n {
        for k in 0..d {
            let at = r.offset();
            let v = r.f64()?;
            if !v.is_finite() {
                return Err(CrlError::SchemaViolation {
                    offset: at,
                    reason: format!("non-finite feature in sample {i}"),
                });
            }
            features[[i, k]] = v;
        }
        for j in 0..n_attr {
            let at = r.offset();
            let label = r.u32()? as usize;
            if label >= schema.cardinality(j) {
                return Err(CrlError::SchemaViolation {
                    offset: at,
                    reason: format!(
                        "sample {i} attribute {j}: label {label} >= cardinality {}",
                        schema.cardinality(j)
                    ),
                });
            }
            labels[[i, j]] = label;
        }
    }
    if r.remaining() != 0 {
        return Err(CrlError::SchemaViolation {
            offset: r.offset(),
            reason: format!("{} trailing bytes after last sample", r.remaining()),
        });
    }
    Dataset::new(schema, features, labels)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_dataset(ds)).map_err(|e| CrlError::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CrlError::io(path, e))?;
    decode_dataset(&bytes)
}
