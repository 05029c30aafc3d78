//! Seeded experiment orchestration.
//!
//! A run is fully determined by its [`ExperimentConfig`] and seed: the seed
//! fixes weight init, every epoch's batch order and every resampling draw;
//! the data section carries its own seeds so the test split is shared by all
//! runs of a comparison.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{cost_weights, make_sampler, most_imbalanced_attr, weighted_cross_entropy, SamplerMode};
use crate::datagen::{generate_synthetic, load_dataset, split, AttributeGen, Dataset, SyntheticConfig};
use crate::error::{CrlError, Result};
use crate::losses::{combine_with, cross_entropy, CrlVariant, HistogramSpec, LossConfig, MarginSpec};
use crate::metrics::{evaluate, gain_table, gain_text, gain_tsv, EvalReport, GainRow};
use crate::mining::MiningMode;
use crate::network::{
    backward, encode_checkpoint, forward, init_params, predict, save_checkpoint, sgd_step, Checkpoint,
    ModelConfig, OptimState, OptimizerConfig, Parameters,
};
use crate::rng::{seeded, STREAM_EPOCH_BASE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `CRLD` file to load; takes precedence over `synthetic`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    /// Train / validation / test fractions.
    pub split: Vec<f64>,
    pub split_seed: u64,
}

/// Four binary attributes at 1:1, 1:10, 1:50 and 1:200, sized for a
/// 20000 / 2000 / 4000 split.
pub fn default_synthetic() -> SyntheticConfig {
    SyntheticConfig {
        feature_dim: 32,
        n_samples: 26_000,
        noise_sigma: 1.0,
        prototype_scale: 3.0,
        seed: 2017,
        attributes: [1.0, 10.0, 50.0, 200.0].into_iter().map(AttributeGen::binary_ratio).collect(),
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: Some(default_synthetic()),
            split: vec![20.0 / 26.0, 2.0 / 26.0, 4.0 / 26.0],
            split_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub trunk_layer_sizes: Vec<usize>,
    pub branch_dim: usize,
    pub normalize_features: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            trunk_layer_sizes: vec![64],
            branch_dim: 64,
            normalize_features: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub variant: CrlVariant,
    pub mining: MiningMode,
    pub k: usize,
    pub m_apc: f64,
    pub hist_bins: usize,
    pub hist_min: f64,
    pub hist_max: f64,
    pub crl_weight: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            variant: CrlVariant::Relative,
            mining: MiningMode::Instance,
            k: 5,
            m_apc: 1.0,
            hist_bins: 51,
            hist_min: 0.0,
            hist_max: 2.0,
            crl_weight: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    #[default]
    None,
    Oversample,
    Downsample,
    CostSensitive,
}

impl std::str::FromStr for BaselineMode {
    type Err = CrlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BaselineMode::None),
            "oversample" => Ok(BaselineMode::Oversample),
            "downsample" => Ok(BaselineMode::Downsample),
            "cost-sensitive" => Ok(BaselineMode::CostSensitive),
            other => Err(CrlError::Config(format!(
                "unknown baseline `{other}` (expected none|oversample|downsample|cost-sensitive)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub mode: BaselineMode,
    /// Resampling reference attribute; defaults to the most imbalanced one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_attr: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub data: DataConfig,
    pub model: ModelSection,
    pub optimizer: OptimizerConfig,
    pub loss: LossSection,
    pub baseline: BaselineSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "crl-i-r".into(),
            output_dir: PathBuf::from("runs"),
            seeds: vec![1],
            batch_size: 128,
            epochs: 30,
            data: DataConfig::default(),
            model: ModelSection::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossSection::default(),
            baseline: BaselineSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CrlError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(CrlError::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(CrlError::Config("epochs must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(CrlError::Config("at least one seed required".into()));
        }
        if self.data.split.len() != 3 {
            return Err(CrlError::Config("data.split needs train/val/test fractions".into()));
        }
        if self.data.path.is_none() && self.data.synthetic.is_none() {
            return Err(CrlError::Config("data needs `path` or a [data.synthetic] section".into()));
        }
        if self.loss.k == 0 {
            return Err(CrlError::Config("loss.k must be >= 1".into()));
        }
        if self.loss.m_apc.is_nan() || self.loss.m_apc <= 0.0 {
            return Err(CrlError::Config("loss.m_apc must be > 0".into()));
        }
        if self.loss.crl_weight.is_nan() || self.loss.crl_weight < 0.0 {
            return Err(CrlError::Config("loss.crl_weight must be >= 0".into()));
        }
        HistogramSpec::new(self.loss.hist_bins, self.loss.hist_min, self.loss.hist_max)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, `output_dir` excluded.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serialises to JSON");
        hex::encode(Sha256::digest(&bytes))
    }

    fn loss_config(&self, schema: &crate::datagen::AttributeSchema) -> Result<LossConfig> {
        Ok(LossConfig {
            variant: self.loss.variant,
            mining: self.loss.mining,
            k: self.loss.k,
            margins: MarginSpec::from_schema(schema, self.loss.m_apc)?,
            histogram: HistogramSpec::new(self.loss.hist_bins, self.loss.hist_min, self.loss.hist_max)?,
            crl_weight: self.loss.crl_weight,
        })
    }
}

/// Train, validation and test splits of one data source.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn prepare_data(cfg: &DataConfig) -> Result<PreparedData> {
    let pooled = match (&cfg.path, &cfg.synthetic) {
        (Some(path), _) => load_dataset(path)?,
        (None, Some(syn)) => generate_synthetic(&syn.to_spec()?)?,
        (None, None) => return Err(CrlError::Config("no data source configured".into())),
    };
    let mut parts = split(&pooled, &cfg.split, cfg.split_seed)?.into_iter();
    let (train, val, test) = match (parts.next(), parts.next(), parts.next()) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(CrlError::Config("data.split needs three fractions".into())),
    };
    Ok(PreparedData { train, val, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub l_ce: f64,
    pub l_crl: f64,
    pub l_bln: f64,
    pub triplets: usize,
    pub pairs: usize,
    pub val_mean_sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochLog>,
    pub final_report: EvalReport,
    pub checkpoint_sha256: String,
    /// Excluded from determinism comparisons.
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CrlError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub resume: Option<Checkpoint>,
    pub dump_mining: Option<PathBuf>,
    /// Write record and checkpoint under `output_dir`.
    pub persist: bool,
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub checkpoint: Checkpoint,
}

/// Evaluation parallelism from `CRL_THREADS` (default 1).
pub fn eval_threads() -> usize {
    std::env::var("CRL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .unwrap_or(1)
}

/// Predicts in row chunks, optionally on several threads.
pub fn predict_chunked(params: &Parameters, features: ArrayView2<'_, f64>, threads: usize) -> Result<Array2<usize>> {
    let n = features.nrows();
    let chunk = n.div_ceil(threads.max(1)).max(1);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let parts: Vec<Result<Array2<usize>>> = if threads <= 1 {
        starts
            .iter()
            .map(|&s0| predict(params, features.slice(s![s0..(s0 + chunk).min(n), ..])))
            .collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = starts
                .iter()
                .map(|&s0| {
                    let view = features.slice(s![s0..(s0 + chunk).min(n), ..]);
                    scope.spawn(move || predict(params, view))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("eval thread panicked")).collect()
        })
    };
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|e| CrlError::Contract(format!("cannot assemble predictions: {e}")))
}

pub fn evaluate_model(params: &Parameters, data: &Dataset, ratio_counts: &[Vec<usize>]) -> Result<EvalReport> {
    let preds = predict_chunked(params, data.features().view(), eval_threads())?;
    evaluate(preds.view(), data.labels().view(), data.schema(), ratio_counts)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seeded(seed, STREAM_EPOCH_BASE + epoch as u64).next_u64()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| CrlError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CrlError::io(dir, e))
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    epoch: usize,
    batch: usize,
    indices: &'a [usize],
    labels: Vec<Vec<usize>>,
    features: Vec<Vec<f64>>,
    l_ce: f64,
    l_bln: f64,
}

#[derive(Serialize)]
struct MiningDump<'a> {
    epoch: usize,
    batch: usize,
    profile: &'a crate::mining::BatchProfile,
    hard: &'a crate::mining::HardSets,
    triplets: usize,
    positive_pairs: usize,
    negative_pairs: usize,
}

/// Trains one seed on prepared data and evaluates it on the test split.
pub fn train_run(config: &ExperimentConfig, data: &PreparedData, seed: u64, opts: &RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    let started = Instant::now();
    let train = &data.train;
    let schema = train.schema();
    if data.val.schema() != schema || data.test.schema() != schema {
        return Err(CrlError::Contract("train/val/test schemas differ".into()));
    }
    let model_cfg = ModelConfig {
        feature_dim: train.feature_dim(),
        trunk_layer_sizes: config.model.trunk_layer_sizes.clone(),
        branch_dim: config.model.branch_dim,
        schema: schema.clone(),
        activation: Default::default(),
        normalize_features: config.model.normalize_features,
        init_seed: seed,
    };
    let (mut params, mut optim, start_epoch) = match &opts.resume {
        Some(ckpt) => {
            if ckpt.params.config != model_cfg {
                return Err(CrlError::Config("checkpoint model does not match config and seed".into()));
            }
            (ckpt.params.clone(), ckpt.optim.clone(), ckpt.epoch)
        }
        None => {
            let p = init_params(&model_cfg)?;
            let o = OptimState::new(&p, config.optimizer);
            (p, o, 0)
        }
    };
    optim.hyper = config.optimizer;
    let loss_cfg = config.loss_config(schema)?;
    let ref_attr = match config.baseline.ref_attr {
        Some(j) if j >= schema.n_attr() => {
            return Err(CrlError::Config(format!("baseline.ref_attr {j} out of range")));
        }
        Some(j) => j,
        None => most_imbalanced_attr(train),
    };
    let weights = (config.baseline.mode == BaselineMode::CostSensitive).then(|| cost_weights(train));
    let sampler_mode = match config.baseline.mode {
        BaselineMode::Oversample => SamplerMode::Oversample,
        BaselineMode::Downsample => SamplerMode::Downsample,
        _ => SamplerMode::Uniform,
    };
    let ratio_counts: Vec<Vec<usize>> = (0..schema.n_attr()).map(|j| train.class_counts(j)).collect();
    if let Some(dir) = &opts.dump_mining {
        ensure_dir(dir)?;
    }

    let mut logs = Vec::new();
    for epoch in start_epoch..config.epochs {
        let plan = make_sampler(train, sampler_mode, ref_attr, epoch_seed(seed, epoch))?;
        let mut sums = (0.0, 0.0, 0.0);
        let (mut n_batches, mut triplets, mut pairs) = (0usize, 0usize, 0usize);
        for (b, chunk) in plan.indices.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = train.gather(chunk);
            let cache = forward(&params, x.view())?;
            let view = cache.view();
            let ce = match &weights {
                Some(w) => weighted_cross_entropy(&view, y.view(), w)?,
                None => cross_entropy(&view, y.view())?,
            };
            let (bundle, mined) = combine_with(ce, &view, y.view(), schema, &loss_cfg)?;
            let l_ce = bundle.diagnostics.ce;
            if !bundle.value.is_finite() {
                let dump = config.output_dir.join(format!("nonfinite_{}_seed{seed}_e{epoch}_b{b}.json", config.name));
                ensure_dir(&config.output_dir)?;
                write_json(
                    &dump,
                    &NonFiniteDump {
                        epoch,
                        batch: b,
                        indices: chunk,
                        labels: y.rows().into_iter().map(|r| r.to_vec()).collect(),
                        features: x.rows().into_iter().map(|r| r.to_vec()).collect(),
                        l_ce,
                        l_bln: bundle.value,
                    },
                )?;
                return Err(CrlError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    dump: dump.display().to_string(),
                });
            }
            if let (Some(dir), Some(m)) = (&opts.dump_mining, &mined) {
                write_json(
                    &dir.join(format!("epoch{epoch:04}_batch{b:05}.json")),
                    &MiningDump {
                        epoch,
                        batch: b,
                        profile: &m.profile,
                        hard: &m.hard,
                        triplets: m.triplets.triplets.len(),
                        positive_pairs: m.pairs.positive.len(),
                        negative_pairs: m.pairs.negative.len(),
                    },
                )?;
            }
            let grad_logits = bundle.grad_logits.as_deref().expect("classification gradient");
            let grads = backward(&params, &cache, grad_logits, bundle.grad_embeddings.as_deref())?;
            sgd_step(&mut params, &grads, &mut optim)?;

            sums.0 += l_ce;
            sums.1 += bundle.value - l_ce;
            sums.2 += bundle.value;
            n_batches += 1;
            triplets += bundle.diagnostics.triplets;
            pairs += bundle.diagnostics.positive_pairs + bundle.diagnostics.negative_pairs;
        }
        let val = evaluate_model(&params, &data.val, &ratio_counts)?;
        let denom = n_batches.max(1) as f64;
        let log = EpochLog {
            epoch,
            batches: n_batches,
            l_ce: sums.0 / denom,
            l_crl: sums.1 / denom,
            l_bln: sums.2 / denom,
            triplets,
            pairs,
            val_mean_sensitivity: val.average_mean_sensitivity,
        };
        if opts.verbose {
            eprintln!(
                "[{} seed {seed}] epoch {:>3}  l_ce {:.4}  l_crl {:.4}  val {:.2}%",
                config.name, epoch, log.l_ce, log.l_crl, log.val_mean_sensitivity
            );
        }
        logs.push(log);
    }

    let final_report = evaluate_model(&params, &data.test, &ratio_counts)?;
    let checkpoint = Checkpoint {
        params,
        optim,
        epoch: config.epochs,
    };
    let ckpt_bytes = encode_checkpoint(&checkpoint)?;
    let record = RunRecord {
        name: config.name.clone(),
        seed,
        config_hash: config.hash(),
        epochs: logs,
        final_report,
        checkpoint_sha256: hex::encode(Sha256::digest(&ckpt_bytes)),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    if opts.persist {
        ensure_dir(&config.output_dir)?;
        let stem = format!("{}_seed{seed}", config.name);
        save_checkpoint(&checkpoint, config.output_dir.join(format!("{stem}.ckpt")))?;
        write_json(&config.output_dir.join(format!("{stem}.json")), &record)?;
    }
    Ok(RunOutcome { record, checkpoint })
}

/// Runs every configured seed, persisting records and checkpoints.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let data = prepare_data(&config.data)?;
    let opts = RunOptions {
        persist: true,
        ..Default::default()
    };
    config
        .seeds
        .iter()
        .map(|&seed| train_run(config, &data, seed, &opts).map(|o| o.record))
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Gain of each candidate method over the baseline, per attribute, as the
/// median over seeds of the seed-paired gains.
pub fn compare(baseline: &[RunRecord], candidates: &[(String, Vec<RunRecord>)]) -> Result<Vec<GainRow>> {
    if baseline.is_empty() {
        return Err(CrlError::Contract("no baseline records".into()));
    }
    let base_by_seed: BTreeMap<u64, &RunRecord> = baseline.iter().map(|r| (r.seed, r)).collect();
    let mut rows: Vec<GainRow> = Vec::new();
    let mut per_cell: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    let mut template: Option<Vec<GainRow>> = None;
    for (name, records) in candidates {
        if records.is_empty() {
            return Err(CrlError::Contract(format!("no records for `{name}`")));
        }
        for rec in records {
            let base = base_by_seed.get(&rec.seed).ok_or_else(|| {
                CrlError::Contract(format!("`{name}` seed {} has no baseline run", rec.seed))
            })?;
            let table = gain_table(&base.final_report, &[(name.clone(), rec.final_report.clone())])?;
            for row in &table {
                per_cell.entry((row.attr, name.clone())).or_default().push(row.gain);
            }
        }
        if template.is_none() {
            let base = baseline[0].final_report.clone();
            let names: Vec<(String, EvalReport)> = candidates
                .iter()
                .map(|(n, _)| (n.clone(), base.clone()))
                .collect();
            template = Some(gain_table(&baseline[0].final_report, &names)?);
        }
    }
    for mut row in template.unwrap_or_default() {
        if let Some(gains) = per_cell.get_mut(&(row.attr, row.method.clone())) {
            row.gain = median(gains);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn load_records(dir: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CrlError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        // Other JSON (mining dumps, summaries) is skipped.
        if let Ok(r) = RunRecord::load(&p) {
            out.push(r);
        }
    }
    Ok(out)
}

/// Groups records by run name (sorted by seed within each group).
pub fn group_records(records: Vec<RunRecord>) -> BTreeMap<String, Vec<RunRecord>> {
    let mut groups: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.name.clone()).or_default().push(r);
    }
    for g in groups.values_mut() {
        g.sort_by_key(|r| r.seed);
    }
    groups
}

/// One method of the benchmark suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteMethod {
    pub name: String,
    pub loss: LossSection,
    pub baseline: BaselineSection,
}

pub const SUITE_BASELINE: &str = "ce";
pub const SUITE_DEFAULT_CRL: &str = "crl-i-r";

/// Plain CE, the six CRL variants and the three classical baselines.
pub fn suite_methods() -> Vec<SuiteMethod> {
    let ce = LossSection {
        variant: CrlVariant::None,
        ..LossSection::default()
    };
    let mut methods = vec![SuiteMethod {
        name: SUITE_BASELINE.into(),
        loss: ce.clone(),
        baseline: BaselineSection::default(),
    }];
    for (mining, m) in [(MiningMode::Class, "c"), (MiningMode::Instance, "i")] {
        for (variant, v) in [(CrlVariant::Relative, "r"), (CrlVariant::Absolute, "a"), (CrlVariant::Distribution, "d")] {
            methods.push(SuiteMethod {
                name: format!("crl-{m}-{v}"),
                loss: LossSection {
                    variant,
                    mining,
                    ..LossSection::default()
                },
                baseline: BaselineSection::default(),
            });
        }
    }
    for (mode, name) in [
        (BaselineMode::Oversample, "oversample"),
        (BaselineMode::Downsample, "downsample"),
        (BaselineMode::CostSensitive, "cost-sensitive"),
    ] {
        methods.push(SuiteMethod {
            name: name.into(),
            loss: ce.clone(),
            baseline: BaselineSection { mode, ref_attr: None },
        });
    }
    methods
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub base: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub methods: Vec<SuiteMethod>,
    pub persist: bool,
    pub verbose: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            base: ExperimentConfig {
                output_dir: PathBuf::from("runs"),
                ..ExperimentConfig::default()
            },
            seeds: vec![1, 2, 3],
            methods: suite_methods(),
            persist: true,
            verbose: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteCheck {
    pub name: String,
    pub passed: bool,
    /// Soft checks only warn when they fail.
    pub soft: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub records: BTreeMap<String, Vec<RunRecord>>,
    pub gains: Vec<GainRow>,
    pub checks: Vec<SuiteCheck>,
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Median over seeds of one attribute's test mean sensitivity.
pub fn median_sensitivity(records: &[RunRecord], attr: usize) -> f64 {
    let mut v: Vec<f64> = records
        .iter()
        .map(|r| r.final_report.attributes[attr].mean_sensitivity)
        .collect();
    median(&mut v)
}

/// Trend, variant and baseline checks on the suite outcome.
pub fn suite_checks(records: &BTreeMap<String, Vec<RunRecord>>, gains: &[GainRow]) -> Vec<SuiteCheck> {
    let mut checks = Vec::new();
    let Some(ce) = records.get(SUITE_BASELINE) else {
        return checks;
    };
    let report = &ce[0].final_report;
    let most = (0..report.attributes.len())
        .max_by_key(|&j| (report.attributes[j].imbalance_ratio, std::cmp::Reverse(j)))
        .unwrap_or(0);

    if let Some(crl) = records.get(SUITE_DEFAULT_CRL) {
        let (m_crl, m_ce) = (median_sensitivity(crl, most), median_sensitivity(ce, most));
        checks.push(SuiteCheck {
            name: "crl-i-r beats ce on the most imbalanced attribute".into(),
            passed: m_crl - m_ce > 0.0,
            soft: false,
            detail: format!(
                "attr {most} ({}): median crl-i-r {m_crl:.2}% vs ce {m_ce:.2}% (gain {:+.2})",
                report.attributes[most].imbalance_ratio,
                m_crl - m_ce
            ),
        });
        let rows: Vec<&GainRow> = gains.iter().filter(|r| r.method == SUITE_DEFAULT_CRL).collect();
        let ratio_rank: Vec<f64> = rows.iter().map(|r| r.ratio.0 as f64).collect();
        let gain: Vec<f64> = rows.iter().map(|r| r.gain).collect();
        let rho = spearman(&ratio_rank, &gain);
        checks.push(SuiteCheck {
            name: "crl-i-r gain grows with imbalance ratio".into(),
            passed: rho > 0.0,
            soft: false,
            detail: format!(
                "spearman {rho:.3}; gains by ratio: {}",
                rows.iter()
                    .map(|r| format!("{}={:+.2}", r.ratio, r.gain))
                    .collect::<Vec<_>>()
                    .join(" ")
            ),
        });
    }

    let mut variant_details = Vec::new();
    let mut all_nonneg = true;
    let mut seen = 0;
    for method in suite_methods().iter().filter(|m| m.loss.variant != CrlVariant::None) {
        let rows: Vec<f64> = gains.iter().filter(|r| r.method == method.name).map(|r| r.gain).collect();
        if rows.is_empty() {
            continue;
        }
        seen += 1;
        let avg = rows.iter().sum::<f64>() / rows.len() as f64;
        all_nonneg &= avg >= 0.0;
        variant_details.push(format!("{}={avg:+.2}", method.name));
    }
    if seen > 0 {
        checks.push(SuiteCheck {
            name: "every crl variant has non-negative average gain".into(),
            passed: all_nonneg && seen == 6,
            soft: false,
            detail: variant_details.join(" "),
        });
    }

    if let (Some(down), Some(over)) = (records.get("downsample"), records.get("oversample")) {
        let d = median_sensitivity(down, most);
        let c = median_sensitivity(ce, most);
        let o = median_sensitivity(over, most);
        checks.push(SuiteCheck {
            name: "down-sampling trails ce or over-sampling on the most imbalanced attribute".into(),
            passed: d < c.max(o),
            soft: true,
            detail: format!("attr {most}: downsample {d:.2}% vs ce {c:.2}%, oversample {o:.2}%"),
        });
    }
    checks
}

/// Runs every method for every seed on one shared dataset.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteResult> {
    let data = prepare_data(&opts.base.data)?;
    let mut records: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
    for method in &opts.methods {
        let config = ExperimentConfig {
            name: method.name.clone(),
            seeds: opts.seeds.clone(),
            loss: method.loss.clone(),
            baseline: method.baseline.clone(),
            ..opts.base.clone()
        };
        for &seed in &opts.seeds {
            let run_opts = RunOptions {
                persist: opts.persist,
                verbose: false,
                ..Default::default()
            };
            let outcome = train_run(&config, &data, seed, &run_opts)?;
            if opts.verbose {
                eprintln!(
                    "{:<16} seed {seed}: avg {:.2}%  [{}]  ({:.1}s)",
                    method.name,
                    outcome.record.final_report.average_mean_sensitivity,
                    outcome
                        .record
                        .final_report
                        .attributes
                        .iter()
                        .map(|a| format!("{:.1}", a.mean_sensitivity))
                        .collect::<Vec<_>>()
                        .join(" "),
                    outcome.record.wall_clock_seconds
                );
            }
            records.entry(method.name.clone()).or_default().push(outcome.record);
        }
    }
    let baseline = records
        .get(SUITE_BASELINE)
        .cloned()
        .ok_or_else(|| CrlError::Config("suite needs a `ce` baseline method".into()))?;
    let candidates: Vec<(String, Vec<RunRecord>)> = opts
        .methods
        .iter()
        .filter(|m| m.name != SUITE_BASELINE)
        .map(|m| (m.name.clone(), records[&m.name].clone()))
        .collect();
    let gains = compare(&baseline, &candidates)?;
    let checks = suite_checks(&records, &gains);
    if opts.persist {
        let dir = &opts.base.output_dir;
        ensure_dir(dir)?;
        let tsv = dir.join("gains.tsv");
        fs::write(&tsv, gain_tsv(&gains)).map_err(|e| CrlError::io(&tsv, e))?;
        let summary = dir.join("summary.txt");
        fs::write(&summary, suite_summary(&records, &gains, &checks)).map_err(|e| CrlError::io(&summary, e))?;
        write_json(&dir.join("checks.json"), &checks)?;
    }
    Ok(SuiteResult { records, gains, checks })
}

pub fn suite_summary(records: &BTreeMap<String, Vec<RunRecord>>, gains: &[GainRow], checks: &[SuiteCheck]) -> String {
    let mut out = String::new();
    out.push_str("median test mean sensitivity per attribute (%)\n");
    for (name, recs) in records {
        let n_attr = recs[0].final_report.attributes.len();
        let cols: Vec<String> = (0..n_attr)
            .map(|j| format!("{:>7.2}", median_sensitivity(recs, j)))
            .collect();
        out.push_str(&format!("{name:<16}{}\n", cols.join("")));
    }
    out.push_str("\nmedian gain over ce (percentage points)\n");
    out.push_str(&gain_text(gains));
    out.push('\n');
    for c in checks {
        let tag = match (c.passed, c.soft) {
            (true, _) => "PASS",
            (false, true) => "WARN",
            (false, false) => "FAIL",
        };
        out.push_str(&format!("[{tag}] {}: {}\n", c.name, c.detail));
    }
    out
}
