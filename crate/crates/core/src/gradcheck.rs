//! End-to-end check of the hand-written backward pass against central
//! finite differences of the full robust loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{loss_gradient, robust_loss, LossConfig, Routing};
use crate::pipeline::{ContextMode, FrozenEncoders, ModelDims, Trainable, Variant};
use crate::tensor::{central_diff_gradient, relative_error, Mat, FD_STEP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub dims: ModelDims,
    pub mode: ContextMode,
    pub variant: Variant,
    pub samples: usize,
    pub tokens: usize,
    pub seed: u64,
    pub step: f64,
    pub loss: LossConfig,
}

impl GradCheckConfig {
    /// Small dimensions so that a full sweep over every parameter is cheap.
    pub fn small(variant: Variant, mode: ContextMode, seed: u64) -> Self {
        Self {
            dims: ModelDims {
                d: 8,
                d_v: 6,
                d_s: 5,
                n_ctx: 3,
                heads: 2,
                d_ff: 16,
                classes: 3,
            },
            mode,
            variant,
            samples: 4,
            tokens: 4,
            seed,
            step: FD_STEP,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub group: String,
    pub name: String,
    pub len: usize,
    pub relative_error: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub variant: Variant,
    pub mode: ContextMode,
    pub seed: u64,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_relative_error: f64,
}

struct Problem {
    enc: FrozenEncoders,
    visuals: Vec<Mat>,
    labels: Vec<usize>,
    routing: Routing,
}

fn build_problem(cfg: &GradCheckConfig) -> Result<(Trainable, Problem)> {
    if cfg.samples == 0 || cfg.tokens == 0 {
        return Err(Error::Config("gradient check needs samples and tokens".into()));
    }
    let model = Trainable::random(&cfg.dims, cfg.mode, cfg.seed)?;
    let enc = FrozenEncoders::random(&cfg.dims, 0.5, cfg.seed ^ 0xe4c0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let visuals = (0..cfg.samples)
        .map(|_| Mat::randn(cfg.tokens, cfg.dims.d_v, 1.0, &mut rng))
        .collect();
    let labels = (0..cfg.samples)
        .map(|_| rng.random_range(0..cfg.dims.classes))
        .collect();
    // Alternate samples between the two loss terms so both are exercised.
    let (reliable, unreliable) = (0..cfg.samples).partition(|i| i % 2 == 0);
    Ok((
        model,
        Problem {
            enc,
            visuals,
            labels,
            routing: Routing {
                reliable,
                unreliable,
            },
        },
    ))
}

fn batch_probs(model: &Trainable, p: &Problem, variant: Variant) -> Result<Mat> {
    let rows = p
        .visuals
        .iter()
        .map(|v| model.forward(v, &p.enc, variant).map(|o| o.probs))
        .collect::<Result<Vec<_>>>()?;
    Mat::from_rows(&rows)
}

fn loss_at(model: &Trainable, p: &Problem, cfg: &GradCheckConfig) -> Result<f64> {
    let probs = batch_probs(model, p, cfg.variant)?;
    Ok(robust_loss(&probs, &p.labels, &p.routing, &cfg.loss)?.value)
}

fn analytic_gradient(model: &Trainable, p: &Problem, cfg: &GradCheckConfig) -> Result<Trainable> {
    let outs = p
        .visuals
        .iter()
        .map(|v| model.forward(v, &p.enc, cfg.variant))
        .collect::<Result<Vec<_>>>()?;
    let probs = Mat::from_rows(&outs.iter().map(|o| o.probs.clone()).collect::<Vec<_>>())?;
    let upstream = loss_gradient(&probs, &p.labels, &p.routing, &cfg.loss)?;
    let mut total = model.zeros_like();
    for (i, out) in outs.iter().enumerate() {
        let g = model.backward(&p.enc, out, upstream.row(i))?;
        total.axpy(1.0, &g)?;
    }
    Ok(total)
}

/// Compares every trainable tensor's analytic gradient with a central
/// difference of the loss. Tensors are probed in parallel.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (model, problem) = build_problem(cfg)?;
    let loss = loss_at(&model, &problem, cfg)?;
    let analytic = analytic_gradient(&model, &problem, cfg)?;
    let names = model.tensors();
    let analytic_tensors = analytic.tensors();
    let checks = (0..names.len())
        .into_par_iter()
        .map(|t| {
            let mut probe = model.clone();
            let base = names[t].2.clone();
            let mut failure = None;
            let numeric = central_diff_gradient(
                |x| {
                    *probe.tensors_mut()[t] = x.clone();
                    match loss_at(&probe, &problem, cfg) {
                        Ok(v) => v,
                        Err(e) => {
                            failure.get_or_insert(e);
                            f64::NAN
                        }
                    }
                },
                &base,
                cfg.step,
            );
            if let Some(e) = failure {
                return Err(e);
            }
            let numeric = numeric?;
            let a = analytic_tensors[t].2;
            Ok(TensorCheck {
                group: names[t].0.to_string(),
                name: names[t].1.clone(),
                len: a.len(),
                relative_error: relative_error(a, &numeric),
                analytic_norm: a.frobenius_norm(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_relative_error = checks.iter().map(|c| c.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        variant: cfg.variant,
        mode: cfg.mode,
        seed: cfg.seed,
        loss,
        tensors: checks,
        max_relative_error,
    })
}
