//! Cosine-annealed SGD over the trainable prompt stack, with periodic
//! transport-based reliability partitions and clean-label evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::FeatureDataset;
use crate::error::{Error, Result};
use crate::objective::{loss_gradient, robust_loss, LossConfig, Routing};
use crate::ot::{ot_partition, PartitionResult, SinkhornSettings};
use crate::pipeline::{
    argmax, base_text_features, encode_image_standin, ContextMode, FrozenEncoders, ModelDims,
    Trainable, Variant, DEFAULT_TAU,
};
use crate::tensor::Mat;

pub const DEFAULT_LR: f64 = 0.002;
pub const FULL_EPOCHS: usize = 200;
pub const DESK_EPOCHS: usize = 60;
pub const DEFAULT_BATCH: usize = 16;

/// `lr0 · ½ · (1 + cos(π t / T))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("cosine schedule needs at least one step".into()));
    }
    if t > total {
        return Err(Error::Config(format!("step {t} beyond schedule length {total}")));
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

/// `θ ← θ − lr·∇θ`, tensor by tensor.
pub fn sgd_step(params: &mut Trainable, grads: &Trainable, lr: f64) -> Result<()> {
    params.axpy(-lr, grads)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "every")]
pub enum RefreshSchedule {
    PerEpoch,
    Every(usize),
}

impl RefreshSchedule {
    fn due(&self, epochs_since_warmup: usize) -> bool {
        match *self {
            RefreshSchedule::PerEpoch => true,
            RefreshSchedule::Every(k) => epochs_since_warmup % k.max(1) == 0,
        }
    }
}

/// How samples are routed to the two loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Transport partition: CE on reliable samples, GCE on the rest.
    Robust,
    /// Every sample under CE, no partition.
    PlainCe,
    /// Every sample under GCE, no partition.
    Gce,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Robust => "robust",
            Objective::PlainCe => "plain-ce",
            Objective::Gce => "gce",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "robust" => Ok(Objective::Robust),
            "plain-ce" | "ce" => Ok(Objective::PlainCe),
            "gce" => Ok(Objective::Gce),
            other => Err(Error::Config(format!(
                "unknown objective `{other}` (robust|plain-ce|gce)"
            ))),
        }
    }
}

/// Shape and frozen-tower settings; `d_v` and the class count come from data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub d_s: usize,
    pub n_ctx: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub context_mode: ContextMode,
    pub tau: f64,
    /// Share of each class text direction aligned with its visual anchor.
    pub fidelity: f64,
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let dims = ModelDims::default();
        Self {
            d: dims.d,
            d_s: dims.d_s,
            n_ctx: dims.n_ctx,
            heads: dims.heads,
            d_ff: dims.d_ff,
            context_mode: ContextMode::ClassShared,
            tau: DEFAULT_TAU,
            fidelity: DEFAULT_FIDELITY,
            encoder_seed: 0,
        }
    }
}

pub const DEFAULT_FIDELITY: f64 = 0.3;

impl ModelConfig {
    pub fn dims(&self, d_v: usize, classes: usize) -> Result<ModelDims> {
        let dims = ModelDims {
            d: self.d,
            d_v,
            d_s: self.d_s,
            n_ctx: self.n_ctx,
            heads: self.heads,
            d_ff: self.d_ff,
            classes,
        };
        dims.validate()?;
        Ok(dims)
    }
}

/// Frozen towers for a dataset. With per-class visual anchors the class
/// tokens are partially aligned with them; without, they are random.
pub fn build_encoders(
    cfg: &ModelConfig,
    dims: &ModelDims,
    anchors: Option<&Mat>,
) -> Result<FrozenEncoders> {
    match anchors {
        Some(a) => FrozenEncoders::anchored(dims, cfg.tau, cfg.encoder_seed, a, cfg.fidelity),
        None => FrozenEncoders::random(dims, cfg.tau, cfg.encoder_seed),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch: usize,
    pub warmup_epochs: usize,
    pub refresh: RefreshSchedule,
    pub variant: Variant,
    pub objective: Objective,
    pub loss: LossConfig,
    pub sinkhorn: SinkhornSettings,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: DEFAULT_LR,
            epochs: FULL_EPOCHS,
            batch: DEFAULT_BATCH,
            warmup_epochs: 1,
            refresh: RefreshSchedule::PerEpoch,
            variant: Variant::Full,
            objective: Objective::Robust,
            loss: LossConfig::default(),
            sinkhorn: SinkhornSettings::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if let RefreshSchedule::Every(0) = self.refresh {
            return Err(Error::Config("partition refresh interval must be at least 1".into()));
        }
        self.loss.validate()?;
        self.sinkhorn.validate()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub reliable_count: Option<usize>,
    pub partition_precision: Option<f64>,
}

/// Model plus optimizer position.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Trainable,
    pub step: usize,
    pub total_steps: usize,
    pub epoch: usize,
}

fn batch_routing(batch: &[usize], membership: &[Option<bool>]) -> Routing {
    let mut r = Routing::default();
    for (local, &i) in batch.iter().enumerate() {
        match membership[i] {
            Some(true) => r.reliable.push(local),
            _ => r.unreliable.push(local),
        }
    }
    r
}

/// One pass over `ds` in a seeded shuffled order. `routing` assigns every
/// sample of `ds` to the CE (reliable) or GCE (unreliable) term.
pub fn train_epoch(
    state: &mut TrainState,
    enc: &FrozenEncoders,
    ds: &FeatureDataset,
    visuals: &[Mat],
    routing: &Routing,
    cfg: &TrainConfig,
) -> Result<MetricsRecord> {
    routing.check_cover(ds.len())?;
    let mut membership = vec![None; ds.len()];
    for &i in &routing.reliable {
        membership[i] = Some(true);
    }
    for &i in &routing.unreliable {
        membership[i] = Some(false);
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1 + state.epoch as u64);
    order.shuffle(&mut rng);

    let lr_start = cosine_lr(state.step.min(state.total_steps), state.total_steps, cfg.lr0)?;
    let labels = ds.observed_labels();
    let mut loss_sum = 0.0;
    for chunk in order.chunks(cfg.batch) {
        let model = &state.model;
        let outs = chunk
            .par_iter()
            .map(|&i| model.forward(&visuals[i], enc, cfg.variant))
            .collect::<Result<Vec<_>>>()?;
        let probs = Mat::from_rows(&outs.iter().map(|o| o.probs.clone()).collect::<Vec<_>>())?;
        let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let local = batch_routing(chunk, &membership);
        let loss = robust_loss(&probs, &batch_labels, &local, &cfg.loss)?;
        let upstream = loss_gradient(&probs, &batch_labels, &local, &cfg.loss)?;
        let grads = outs
            .par_iter()
            .enumerate()
            .map(|(b, out)| model.backward(enc, out, upstream.row(b)))
            .collect::<Result<Vec<_>>>()?;
        let mut total = model.zeros_like();
        for g in &grads {
            total.axpy(1.0, g)?;
        }
        let lr = cosine_lr(state.step.min(state.total_steps), state.total_steps, cfg.lr0)?;
        sgd_step(&mut state.model, &total, lr)?;
        if !state.model.is_finite() {
            return Err(Error::NonFinite(format!("parameters after step {}", state.step)));
        }
        state.step += 1;
        loss_sum += loss.value * chunk.len() as f64;
    }
    state.epoch += 1;
    Ok(MetricsRecord {
        epoch: state.epoch,
        lr: lr_start,
        train_loss: if ds.is_empty() { 0.0 } else { loss_sum / ds.len() as f64 },
        test_accuracy: f64::NAN,
        reliable_count: None,
        partition_precision: None,
    })
}

/// Predicted classes for pre-extracted samples.
pub fn predict(
    model: &Trainable,
    enc: &FrozenEncoders,
    variant: Variant,
    visuals: &[Mat],
) -> Result<Vec<usize>> {
    visuals
        .par_iter()
        .map(|v| model.forward(v, enc, variant).map(|o| argmax(&o.probs)))
        .collect()
}

/// Fraction of samples whose argmax prediction equals the clean label.
pub fn evaluate_accuracy(
    model: &Trainable,
    enc: &FrozenEncoders,
    variant: Variant,
    test: &FeatureDataset,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let visuals = test.samples()?;
    accuracy_on(model, enc, variant, &visuals, test.clean_labels())
}

fn accuracy_on(
    model: &Trainable,
    enc: &FrozenEncoders,
    variant: Variant,
    visuals: &[Mat],
    labels: &[usize],
) -> Result<f64> {
    if visuals.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict(model, enc, variant, visuals)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / visuals.len() as f64)
}

/// Transport partition of the training set from the frozen image features
/// and the current unmodulated context.
pub fn refresh_partition(
    model: &Trainable,
    enc: &FrozenEncoders,
    image_feats: &Mat,
    observed_labels: &[usize],
    settings: &SinkhornSettings,
) -> Result<(PartitionResult, bool)> {
    let text = base_text_features(model, enc)?;
    let (part, plan) = ot_partition(&text, image_feats, enc.tau, observed_labels, settings)?;
    Ok((part, plan.converged))
}

pub fn image_features(enc: &FrozenEncoders, visuals: &[Mat]) -> Result<Mat> {
    let rows = visuals
        .iter()
        .map(|v| encode_image_standin(v, enc))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(Mat::zeros(0, enc.image_proj.cols()));
    }
    Mat::from_rows(&rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub trainable: usize,
    pub frozen: usize,
    /// `trainable / frozen`.
    pub ratio: f64,
    pub trainable_groups: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub variant: Variant,
    pub objective: Objective,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub metrics: Vec<MetricsRecord>,
    pub parameters: ParameterCounts,
    pub final_partition: Option<PartitionResult>,
    pub unconverged_partitions: usize,
}

pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub model: Trainable,
    pub encoders: FrozenEncoders,
}

/// Full training run for one seed. Warm-up epochs send every sample to the
/// GCE term; after that the robust objective refreshes the transport
/// partition on schedule.
pub fn run_experiment(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &FeatureDataset,
    test: &FeatureDataset,
    anchors: Option<&Mat>,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train.token_dim() != test.token_dim() || train.classes() != test.classes() {
        return Err(Error::dim("run_experiment", "train and test sets disagree on shape"));
    }
    let dims = model_cfg.dims(train.token_dim(), train.classes())?;
    let enc = build_encoders(model_cfg, &dims, anchors)?;
    let frozen_fingerprint = enc.fingerprint();
    let model = Trainable::init(&dims, model_cfg.context_mode, cfg.seed)?;

    let train_visuals = train.samples()?;
    let test_visuals = test.samples()?;
    let image_feats = image_features(&enc, &train_visuals)?;
    let n = train.len();
    let total_steps = (cfg.epochs * cfg.steps_per_epoch(n)).max(1);
    let mut state = TrainState {
        model,
        step: 0,
        total_steps,
        epoch: 0,
    };
    let initial_accuracy =
        accuracy_on(&state.model, &enc, cfg.variant, &test_visuals, test.clean_labels())?;

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut partition: Option<PartitionResult> = None;
    let mut unconverged = 0;
    for epoch in 0..cfg.epochs {
        let routing = match cfg.objective {
            Objective::PlainCe => Routing::all_reliable(n),
            Objective::Gce => Routing::all_unreliable(n),
            Objective::Robust if epoch < cfg.warmup_epochs => Routing::all_unreliable(n),
            Objective::Robust => {
                if partition.is_none() || cfg.refresh.due(epoch - cfg.warmup_epochs) {
                    let (p, converged) = refresh_partition(
                        &state.model,
                        &enc,
                        &image_feats,
                        train.observed_labels(),
                        &cfg.sinkhorn,
                    )?;
                    unconverged += usize::from(!converged);
                    partition = Some(p);
                }
                partition.as_ref().map(PartitionResult::routing).unwrap_or_default()
            }
        };
        let reliable_count = match cfg.objective {
            Objective::Robust if epoch >= cfg.warmup_epochs => Some(routing.reliable.len()),
            _ => None,
        };
        let precision = reliable_count.and_then(|_| {
            partition
                .as_ref()
                .and_then(|p| p.precision(train.noise_mask()))
        });
        let mut record = train_epoch(&mut state, &enc, train, &train_visuals, &routing, cfg)?;
        record.test_accuracy =
            accuracy_on(&state.model, &enc, cfg.variant, &test_visuals, test.clean_labels())?;
        record.reliable_count = reliable_count;
        record.partition_precision = precision;
        metrics.push(record);
    }
    if enc.fingerprint() != frozen_fingerprint {
        return Err(Error::Config("frozen encoders changed during training".into()));
    }

    let final_accuracy = metrics.last().map_or(initial_accuracy, |m| m.test_accuracy);
    let trainable = state.model.parameter_count();
    let frozen = enc.parameter_count();
    let report = ExperimentReport {
        seed: cfg.seed,
        variant: cfg.variant,
        objective: cfg.objective,
        initial_accuracy,
        final_accuracy,
        metrics,
        parameters: ParameterCounts {
            trainable,
            frozen,
            ratio: trainable as f64 / frozen as f64,
            trainable_groups: state
                .model
                .group_counts()
                .into_iter()
                .map(|(g, c)| (g.to_string(), c))
                .collect(),
        },
        final_partition: partition,
        unconverged_partitions: unconverged,
    };
    Ok(ExperimentOutcome {
        report,
        model: state.model,
        encoders: enc,
    })
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    // Identical inputs report exactly (v, 0) rather than rounding residue.
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
