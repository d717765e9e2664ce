//! Flat run configuration: one JSON object naming every knob, with
//! defaults, validation at load time and conversion into module configs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{NoiseType, SyntheticSpec};
use crate::error::{Error, Result};
use crate::objective::{AlphaMode, LossConfig, DEFAULT_Q};
use crate::ot::{
    DeltaRule, SinkhornSettings, DEFAULT_DELTA_FACTOR, DEFAULT_EPSILON, DEFAULT_MAX_ITERS,
    DEFAULT_TOL,
};
use crate::pipeline::{ContextMode, ModelDims, Variant, DEFAULT_TAU};
use crate::trainer::{
    ModelConfig, Objective, RefreshSchedule, TrainConfig, DEFAULT_BATCH, DEFAULT_FIDELITY,
    DEFAULT_LR, FULL_EPOCHS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaKind {
    Adaptive,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaKind {
    /// `delta` times the largest column marginal.
    Relative,
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // model
    pub d: usize,
    pub d_s: usize,
    pub n_ctx: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub context_mode: ContextMode,
    pub tau: f64,
    pub fidelity: f64,
    pub encoder_seed: u64,
    pub variant: Variant,

    // synthetic data and noise
    pub dataset: String,
    pub classes: usize,
    pub shots: usize,
    pub tokens: usize,
    pub dim: usize,
    pub n_informative: usize,
    pub eps_v: f64,
    pub margin_scale: f64,
    pub test_per_class: usize,
    pub noise_type: NoiseType,
    pub noise_rate: f64,

    // objective and partition
    pub objective: Objective,
    pub q: f64,
    pub alpha_mode: AlphaKind,
    /// Only read when `alpha_mode` is `fixed`.
    pub alpha: f64,
    pub delta_mode: DeltaKind,
    pub delta: f64,
    pub epsilon: f64,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,

    // optimisation
    pub lr0: f64,
    pub epochs: usize,
    pub batch: usize,
    pub warmup_epochs: usize,
    /// Partition refresh interval in epochs; 1 refreshes every epoch.
    pub refresh_every: usize,
    pub seed: u64,
    pub seeds: Vec<u64>,

    // paths
    pub data: Option<String>,
    pub test: Option<String>,
    pub out: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dims = ModelDims::default();
        let synth = SyntheticSpec::default();
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
            variant: Variant::Full,
            dataset: "synthetic".into(),
            classes: synth.classes,
            shots: synth.per_class,
            tokens: synth.tokens,
            dim: synth.dim,
            n_informative: synth.n_informative,
            eps_v: synth.eps_v,
            margin_scale: synth.margin_scale,
            test_per_class: 50,
            noise_type: NoiseType::Sym,
            noise_rate: 0.0,
            objective: Objective::Robust,
            q: DEFAULT_Q,
            alpha_mode: AlphaKind::Adaptive,
            alpha: 0.5,
            delta_mode: DeltaKind::Relative,
            delta: DEFAULT_DELTA_FACTOR,
            epsilon: DEFAULT_EPSILON,
            sinkhorn_max_iters: DEFAULT_MAX_ITERS,
            sinkhorn_tol: DEFAULT_TOL,
            lr0: DEFAULT_LR,
            epochs: FULL_EPOCHS,
            batch: DEFAULT_BATCH,
            warmup_epochs: 1,
            refresh_every: 1,
            seed: 0,
            seeds: vec![0, 1, 2],
            data: None,
            test: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Sets one key from its textual value. The value is read as JSON when
    /// it parses as JSON and as a bare string otherwise, so `variant=full`
    /// and `seeds=[1,2]` both work. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut value = serde_json::to_value(&*self)?;
        let map = value.as_object_mut().expect("config serializes to an object");
        if !map.contains_key(key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.into()));
        map.insert(key.to_string(), parsed);
        let updated: Self = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("bad value for `{key}`: {e}")))?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().dims(self.dim, self.classes)?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.fidelity) {
            return Err(Error::Config(format!("fidelity must lie in [0, 1], got {}", self.fidelity)));
        }
        self.synthetic_spec(0).validate()?;
        if self.shots == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        if self.test_per_class == 0 {
            return Err(Error::Config("test_per_class must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!("noise_rate must lie in [0, 1], got {}", self.noise_rate)));
        }
        if self.refresh_every == 0 {
            return Err(Error::Config("refresh_every must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.dataset.is_empty() || self.dataset.contains([',', '\n', '"']) {
            return Err(Error::Config("dataset name must be non-empty plain text".into()));
        }
        self.train_config(self.seed).validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            d_s: self.d_s,
            n_ctx: self.n_ctx,
            heads: self.heads,
            d_ff: self.d_ff,
            context_mode: self.context_mode,
            tau: self.tau,
            fidelity: self.fidelity,
            encoder_seed: self.encoder_seed,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            q: self.q,
            alpha: match self.alpha_mode {
                AlphaKind::Adaptive => AlphaMode::Adaptive,
                AlphaKind::Fixed => AlphaMode::Fixed(self.alpha),
            },
        }
    }

    pub fn sinkhorn_settings(&self) -> SinkhornSettings {
        SinkhornSettings {
            epsilon: self.epsilon,
            max_iters: self.sinkhorn_max_iters,
            tol: self.sinkhorn_tol,
            delta: match self.delta_mode {
                DeltaKind::Relative => DeltaRule::Relative(self.delta),
                DeltaKind::Absolute => DeltaRule::Absolute(self.delta),
            },
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            epochs: self.epochs,
            batch: self.batch,
            warmup_epochs: self.warmup_epochs,
            refresh: match self.refresh_every {
                1 => RefreshSchedule::PerEpoch,
                k => RefreshSchedule::Every(k),
            },
            variant: self.variant,
            objective: self.objective,
            loss: self.loss_config(),
            sinkhorn: self.sinkhorn_settings(),
            seed,
        }
    }

    /// Training-set spec: `shots` samples per class.
    pub fn synthetic_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            per_class: self.shots,
            tokens: self.tokens,
            dim: self.dim,
            n_informative: self.n_informative,
            eps_v: self.eps_v,
            margin_scale: self.margin_scale,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let once = cfg.to_json().unwrap();
        let back = RunConfig::from_json(&once).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json().unwrap(), once);
    }

    #[test]
    fn partial_document_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"epochs": 3, "variant": "no-vision"}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.variant, Variant::NoVision);
        assert_eq!(cfg.batch, DEFAULT_BATCH);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RunConfig::from_json(r#"{"epoch": 3}"#).is_err());
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("bogus", "1"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        for doc in [
            r#"{"q": 0.0}"#,
            r#"{"q": 1.5}"#,
            r#"{"tau": 0}"#,
            r#"{"lr0": -1}"#,
            r#"{"batch": 0}"#,
            r#"{"noise_rate": 1.2}"#,
            r#"{"seeds": []}"#,
            r#"{"heads": 5}"#,
            r#"{"n_informative": 9}"#,
            r#"{"alpha_mode": "fixed", "alpha": 2}"#,
            r#"{"epsilon": 0}"#,
        ] {
            assert!(RunConfig::from_json(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn set_parses_json_or_string() {
        let mut cfg = RunConfig::default();
        cfg.set("variant", "vision-no-film").unwrap();
        cfg.set("seeds", "[4,5]").unwrap();
        cfg.set("noise_rate", "0.25").unwrap();
        cfg.set("data", "x.vpft").unwrap();
        assert_eq!(cfg.variant, Variant::VisionNoFilm);
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.noise_rate, 0.25);
        assert_eq!(cfg.data.as_deref(), Some("x.vpft"));
        assert!(cfg.set("epochs", "many").is_err());
        assert_eq!(cfg.epochs, FULL_EPOCHS);
    }

    #[test]
    fn conversions() {
        let cfg = RunConfig::from_json(
            r#"{"alpha_mode": "fixed", "alpha": 0.3, "delta_mode": "absolute", "delta": 0.01, "refresh_every": 3}"#,
        )
        .unwrap();
        let t = cfg.train_config(9);
        assert_eq!(t.loss.alpha, AlphaMode::Fixed(0.3));
        assert_eq!(t.sinkhorn.delta, DeltaRule::Absolute(0.01));
        assert_eq!(t.refresh, RefreshSchedule::Every(3));
        assert_eq!(t.seed, 9);
        assert_eq!(RunConfig::default().train_config(0), TrainConfig::default());
        let spec = cfg.synthetic_spec(4);
        assert_eq!((spec.per_class, spec.seed), (16, 4));
    }
}
