//! Numerical checks of the attention-margin robustness argument: margins,
//! softmax-tail leakage, empirical Lipschitz constants, the deviation of the
//! modulated prompt from its clean-evidence counterpart, and argmax
//! preservation under bounded logit perturbations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{
    argmax, attention_scores, class_logits, cross_modal_attend, encode_image_standin,
    encode_text_standin, modulate, project_visual_tokens, FrozenEncoders, ModelDims,
    PipelineParams, Variant,
};
use crate::tensor::{dot, layer_norm_rows, softmax, Mat, LN_EPS};

fn split_scores(scores: &[f64], informative: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut is_inf = vec![false; scores.len()];
    for &i in informative {
        match is_inf.get_mut(i) {
            None => {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: scores.len(),
                })
            }
            Some(true) => {
                return Err(Error::UndefinedMargin(format!("index {i} listed twice")))
            }
            Some(flag) => *flag = true,
        }
    }
    let (inf, irr): (Vec<_>, Vec<_>) = scores.iter().zip(&is_inf).partition(|(_, &f)| f);
    let inf: Vec<f64> = inf.into_iter().map(|(s, _)| *s).collect();
    let irr: Vec<f64> = irr.into_iter().map(|(s, _)| *s).collect();
    if inf.is_empty() {
        return Err(Error::UndefinedMargin("no informative tokens".into()));
    }
    if irr.is_empty() {
        return Err(Error::UndefinedMargin("every token is informative".into()));
    }
    Ok((inf, irr))
}

/// `min(informative scores) − max(irrelevant scores)`; may be negative.
pub fn attention_margin(scores: &[f64], informative: &[usize]) -> Result<f64> {
    let (inf, irr) = split_scores(scores, informative)?;
    let lo = inf.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = irr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(lo - hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassBound {
    pub measured: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Softmax mass on irrelevant tokens against `|irrelevant| · e^{−Δ}`.
pub fn irrelevant_mass_bound_check(scores: &[f64], informative: &[usize]) -> Result<MassBound> {
    let delta = attention_margin(scores, informative)?;
    let weights = softmax(scores);
    let mut is_inf = vec![false; scores.len()];
    for &i in informative {
        is_inf[i] = true;
    }
    let measured: f64 = weights
        .iter()
        .zip(&is_inf)
        .filter(|(_, &f)| !f)
        .map(|(w, _)| w)
        .sum();
    let n_irr = scores.len() - informative.len();
    let bound = n_irr as f64 * (-delta).exp();
    Ok(MassBound {
        measured,
        bound,
        holds: measured <= bound,
    })
}

/// Largest `‖F(x) − F(y)‖_F / ‖x − y‖_F` over seeded probe pairs drawn in a
/// ball of `radius` around `base` (the base point itself is one probe).
/// A lower bound on the Lipschitz constant of `map` in that ball.
pub fn empirical_lipschitz<F>(
    mut map: F,
    base: &Mat,
    n_probes: usize,
    radius: f64,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&Mat) -> Result<Mat>,
{
    if n_probes < 2 {
        return Err(Error::Config("empirical Lipschitz needs at least 2 probes".into()));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!("probe radius must be > 0, got {radius}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut points = vec![base.clone()];
    while points.len() < n_probes {
        let dir = Mat::randn(base.rows(), base.cols(), 1.0, &mut rng);
        let norm = dir.frobenius_norm();
        if norm == 0.0 {
            continue;
        }
        let r = radius * unit.sample(&mut rng);
        points.push(base.add(&dir.scale(r / norm))?);
    }
    let images = points.iter().map(&mut map).collect::<Result<Vec<_>>>()?;
    let mut best: f64 = 0.0;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let dx = points[i].sub(&points[j])?.frobenius_norm();
            if dx == 0.0 {
                continue;
            }
            let dy = images[i].sub(&images[j])?.frobenius_norm();
            best = best.max(dy / dx);
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginCheck {
    /// `max_k |l_k − l*_k|`.
    pub deviation: f64,
    /// Top-1 minus top-2 of the clean logits.
    pub m_star: f64,
    /// `deviation < m_star / 2`.
    pub premise: bool,
    pub preserved: bool,
}

fn top_two_gap(logits: &[f64]) -> f64 {
    let k = argmax(logits);
    let second = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != k)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    logits[k] - second
}

/// If the perturbed logits stay within half the clean margin (∞-norm), the
/// argmax cannot move. Reports whether the premise held and whether the
/// argmax matched.
pub fn margin_preservation_check(clean: &[f64], perturbed: &[f64]) -> Result<MarginCheck> {
    if clean.len() != perturbed.len() || clean.len() < 2 {
        return Err(Error::dim(
            "margin_preservation_check",
            format!("{} vs {} logits", clean.len(), perturbed.len()),
        ));
    }
    let deviation = clean
        .iter()
        .zip(perturbed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let m_star = top_two_gap(clean);
    Ok(MarginCheck {
        deviation,
        m_star,
        premise: deviation < m_star / 2.0,
        preserved: argmax(clean) == argmax(perturbed),
    })
}

/// Recipe for one synthetic theory instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub dims: ModelDims,
    pub tokens: usize,
    pub n_informative: usize,
    pub eps_v: f64,
    /// Attention margin the score map is scaled to.
    pub delta: f64,
    pub margin_scale: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self {
            dims: ModelDims {
                d: 16,
                d_v: 24,
                d_s: 12,
                n_ctx: 4,
                heads: 2,
                d_ff: 32,
                classes: 5,
            },
            tokens: 8,
            n_informative: 5,
            eps_v: 0.1,
            delta: 4.0,
            margin_scale: 1.0,
            tau: 0.07,
            seed: 0,
        }
    }
}

/// Measured quantities of one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryInstance {
    /// Projected clean signal `μ · W_p`.
    pub s: Vec<f64>,
    pub informative_idx: Vec<usize>,
    /// Minimum margin over query tokens and heads (`+∞` with no distractors).
    pub delta: f64,
    pub eps_v: f64,
    /// `|irrelevant| · max ‖LN(z_m) W_V‖` over irrelevant tokens.
    pub c: f64,
    pub l_mod_hat: f64,
    pub l_h_hat: f64,
    /// Clean top-1 minus top-2 logit.
    pub m_star: f64,
    pub logits: Vec<f64>,
    pub clean_logits: Vec<f64>,
}

/// A fully materialised instance: context, tokens and parameters.
#[derive(Clone, Debug)]
pub struct TheoryProblem {
    pub spec: InstanceSpec,
    pub context: Mat,
    pub visual: Mat,
    pub params: PipelineParams,
    pub encoders: FrozenEncoders,
    pub signal: Mat,
}

const CONTEXT_JITTER: f64 = 0.1;
const DISTRACTOR_RESAMPLES: usize = 100;
const LIPSCHITZ_PROBES: usize = 6;

fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn distractor(mu: &[f64], scale: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    for _ in 0..crate::data::REJECTION_BUDGET {
        let v = unit(gaussian_vec(mu.len(), rng));
        if dot(&v, mu).abs() < crate::data::DISTRACTOR_MAX_ABS_COS {
            return Ok(v.into_iter().map(|x| x * scale).collect());
        }
    }
    Err(Error::Generation("distractor rejection budget exhausted".into()))
}

/// Builds an instance whose attention scores factor as
/// `β · (LN(C_j)·q̂) · (LN(z_m)·k̂)` with `k̂` along the clean signal, and
/// `β` chosen so the smallest per-query margin equals `spec.delta`.
///
/// Every random draw is independent of `eps_v` and `delta`, so grids over
/// those two share their randomness.
pub fn build_instance(spec: &InstanceSpec) -> Result<TheoryProblem> {
    let dims = spec.dims;
    dims.validate()?;
    if spec.n_informative == 0 || spec.n_informative > spec.tokens {
        return Err(Error::Config("n_informative must lie in [1, tokens]".into()));
    }
    if !(spec.eps_v >= 0.0) || !(spec.delta >= 0.0) {
        return Err(Error::Config("eps_v and delta must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut params = PipelineParams::random(&dims, &mut rng);
    let encoders = FrozenEncoders::random(&dims, spec.tau, spec.seed ^ 0x7e0)?;

    let mu = unit(gaussian_vec(dims.d_v, &mut rng));
    let noise: Vec<Vec<f64>> = (0..spec.n_informative)
        .map(|_| gaussian_vec(dims.d_v, &mut rng))
        .collect();
    let base = gaussian_vec(dims.d, &mut rng);
    let jitter = Mat::randn(dims.n_ctx, dims.d, CONTEXT_JITTER, &mut rng);
    let mut context = jitter;
    for j in 0..dims.n_ctx {
        for (x, b) in context.row_mut(j).iter_mut().zip(&base) {
            *x += b;
        }
    }

    let scale = spec.eps_v / (dims.d_v as f64).sqrt();
    let mut visual = Mat::zeros(spec.tokens, dims.d_v);
    for (t, g) in noise.iter().enumerate() {
        let tok = unit(mu.iter().zip(g).map(|(m, z)| m + scale * z).collect());
        visual.row_mut(t).copy_from_slice(&tok);
    }
    let signal = project_visual_tokens(&Mat::row_vector(&mu), &params.w_p)?;
    let ln_s = layer_norm_rows(&signal, LN_EPS);
    let k_hat = unit(ln_s.row(0).to_vec());
    let ln_c = layer_norm_rows(&context, LN_EPS);
    let q_hat = unit(ln_c.mean_rows().into_vec());
    let rho_min = ln_c
        .iter_rows()
        .map(|r| dot(r, &q_hat))
        .fold(f64::INFINITY, f64::min);
    if !(rho_min > 0.0) {
        return Err(Error::Degenerate("query rows not aligned with their mean".into()));
    }

    let n_irr = spec.tokens - spec.n_informative;
    let mut gap0 = f64::INFINITY;
    for attempt in 0..=DISTRACTOR_RESAMPLES {
        if attempt == DISTRACTOR_RESAMPLES {
            return Err(Error::Generation(
                "could not place distractors below the informative key scores".into(),
            ));
        }
        for t in spec.n_informative..spec.tokens {
            let v = distractor(&mu, spec.margin_scale, &mut rng)?;
            visual.row_mut(t).copy_from_slice(&v);
        }
        if n_irr == 0 {
            break;
        }
        let z = project_visual_tokens(&visual, &params.w_p)?;
        let kappa: Vec<f64> = layer_norm_rows(&z, LN_EPS)
            .iter_rows()
            .map(|r| dot(r, &k_hat))
            .collect();
        let lo = kappa[..spec.n_informative].iter().copied().fold(f64::INFINITY, f64::min);
        let hi = kappa[spec.n_informative..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        gap0 = lo - hi;
        if gap0 > 0.0 {
            break;
        }
    }
    let beta = if n_irr == 0 { 1.0 } else { spec.delta / (rho_min * gap0) };
    let dh = dims.head_dim();
    let mut w_q = Mat::zeros(dims.d, dims.d);
    let mut w_k = Mat::zeros(dims.d, dims.d);
    for h in 0..dims.heads {
        for r in 0..dims.d {
            w_q.as_mut_slice()[r * dims.d + h * dh] = q_hat[r];
            w_k.as_mut_slice()[r * dims.d + h * dh] = beta * (dh as f64).sqrt() * k_hat[r];
        }
    }
    params.attention.w_q = w_q;
    params.attention.w_k = w_k;
    Ok(TheoryProblem {
        spec: spec.clone(),
        context,
        visual,
        params,
        encoders,
        signal,
    })
}

fn prompt_logits(c_hat: &Mat, h: &[f64], enc: &FrozenEncoders) -> Result<Vec<f64>> {
    let rows = (0..enc.classes())
        .map(|k| encode_text_standin(c_hat, k, enc))
        .collect::<Result<Vec<_>>>()?;
    class_logits(h, &Mat::from_rows(&rows)?, enc.tau)
}

/// `‖Ĉ − Ĉ*‖_F`, where `Ĉ` modulates the context with attention over every
/// visual token and `Ĉ*` with attention over the clean signal alone.
pub fn modulation_deviation(problem: &TheoryProblem) -> Result<(f64, TheoryInstance)> {
    let spec = &problem.spec;
    let p = &problem.params;
    let c = &problem.context;
    let z = project_visual_tokens(&problem.visual, &p.w_p)?;
    let a = cross_modal_attend(c, &z, &p.attention)?;
    let a_star = cross_modal_attend(c, &problem.signal, &p.attention)?;
    let c_hat = modulate(c, &a, p, Variant::Full)?;
    let c_star = modulate(c, &a_star, p, Variant::Full)?;
    let dev = c_hat.sub(&c_star)?.frobenius_norm();

    let informative_idx: Vec<usize> = (0..spec.n_informative).collect();
    let delta = if spec.n_informative == spec.tokens {
        f64::INFINITY
    } else {
        let mut worst = f64::INFINITY;
        for head in attention_scores(c, &z, &p.attention)? {
            for row in head.iter_rows() {
                worst = worst.min(attention_margin(row, &informative_idx)?);
            }
        }
        worst
    };

    let values = crate::tensor::matmul(&layer_norm_rows(&z, LN_EPS), &p.attention.w_v)?;
    let n_irr = spec.tokens - spec.n_informative;
    let max_value = values
        .iter_rows()
        .skip(spec.n_informative)
        .map(|r| dot(r, r).sqrt())
        .fold(0.0, f64::max);

    let h = encode_image_standin(&problem.visual, &problem.encoders)?;
    let logits = prompt_logits(&c_hat, &h, &problem.encoders)?;
    let clean_logits = prompt_logits(&c_star, &h, &problem.encoders)?;
    let radius = a.sub(&a_star)?.frobenius_norm().max(1e-3);
    let l_mod_hat = empirical_lipschitz(
        |x| modulate(c, x, p, Variant::Full),
        &a_star,
        LIPSCHITZ_PROBES,
        radius,
        spec.seed ^ 0x11,
    )?;
    let l_h_hat = empirical_lipschitz(
        |x| prompt_logits(x, &h, &problem.encoders).map(|l| Mat::row_vector(&l)),
        &c_star,
        LIPSCHITZ_PROBES,
        dev.max(1e-3),
        spec.seed ^ 0x22,
    )?;
    Ok((
        dev,
        TheoryInstance {
            s: problem.signal.row(0).to_vec(),
            informative_idx,
            delta,
            eps_v: spec.eps_v,
            c: n_irr as f64 * max_value,
            l_mod_hat,
            l_h_hat,
            m_star: top_two_gap(&clean_logits),
            logits,
            clean_logits,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub value: f64,
    pub mean_deviation: f64,
    pub mean_measured_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheorySuiteConfig {
    pub seed: u64,
    pub grid_delta: Vec<f64>,
    pub grid_eps_v: Vec<f64>,
    /// `ε_v` held fixed along the margin grid.
    pub eps_v_fixed: f64,
    /// Margin held fixed along the `ε_v` grid.
    pub delta_fixed: f64,
    pub trend_seeds: usize,
    pub mass_vectors: usize,
    pub margin_instances: usize,
    /// Upper bound on instances drawn while collecting `margin_instances`
    /// whose premise holds.
    pub margin_max_draws: usize,
}

impl Default for TheorySuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid_delta: vec![0.0, 1.0, 2.0, 4.0],
            grid_eps_v: vec![0.0, 0.05, 0.1, 0.2],
            eps_v_fixed: 0.1,
            delta_fixed: 4.0,
            trend_seeds: 20,
            mass_vectors: 100,
            margin_instances: 200,
            margin_max_draws: 4000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub config: TheorySuiteConfig,
    pub mass_bound_vectors: usize,
    pub mass_bound_violations: usize,
    pub mass_bound_pass: bool,
    pub delta_trend: Vec<TrendPoint>,
    /// Seed-averaged deviation strictly decreasing along the margin grid.
    pub delta_trend_pass: bool,
    pub eps_trend: Vec<TrendPoint>,
    /// Seed-averaged deviation non-decreasing along the `ε_v` grid.
    pub eps_trend_pass: bool,
    pub margin_draws: usize,
    pub margin_premise_held: usize,
    pub margin_preserved: usize,
    pub margin_pass: bool,
    pub mean_l_mod_hat: f64,
    pub mean_l_h_hat: f64,
    pub pass: bool,
}

fn sub_seed(base: u64, tag: u64, i: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(tag << 32)
        .wrapping_add(i as u64)
}

fn trend(
    cfg: &TheorySuiteConfig,
    grid: &[f64],
    make: impl Fn(f64, u64) -> InstanceSpec,
    tag: u64,
    lip: &mut Vec<(f64, f64)>,
) -> Result<Vec<TrendPoint>> {
    grid.iter()
        .map(|&value| {
            let mut dev_sum = 0.0;
            let mut delta_sum = 0.0;
            for i in 0..cfg.trend_seeds {
                let problem = build_instance(&make(value, sub_seed(cfg.seed, tag, i)))?;
                let (dev, inst) = modulation_deviation(&problem)?;
                dev_sum += dev;
                delta_sum += inst.delta;
                lip.push((inst.l_mod_hat, inst.l_h_hat));
            }
            let n = cfg.trend_seeds.max(1) as f64;
            Ok(TrendPoint {
                value,
                mean_deviation: dev_sum / n,
                mean_measured_delta: delta_sum / n,
            })
        })
        .collect()
}

/// Random score vectors with a random informative subset.
fn mass_bound_sweep(seed: u64, count: usize) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for _ in 0..count {
        let m = 2 + (rand::Rng::random_range(&mut rng, 0..15usize));
        let n_inf = 1 + rand::Rng::random_range(&mut rng, 0..m - 1);
        let spread = 0.5 + 10.0 * rand::Rng::random::<f64>(&mut rng);
        let scores: Vec<f64> = (0..m)
            .map(|_| spread * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let informative: Vec<usize> = rand::seq::index::sample(&mut rng, m, n_inf).into_vec();
        if !irrelevant_mass_bound_check(&scores, &informative)?.holds {
            violations += 1;
        }
    }
    Ok(violations)
}

/// Runs every property of the module and reports measured quantities.
pub fn run_theory_suite(cfg: &TheorySuiteConfig) -> Result<TheoryReport> {
    let mass_bound_violations = mass_bound_sweep(cfg.seed, cfg.mass_vectors)?;
    let mut lip = Vec::new();
    let base = InstanceSpec::default();
    let delta_trend = trend(
        cfg,
        &cfg.grid_delta,
        |delta, seed| InstanceSpec { delta, eps_v: cfg.eps_v_fixed, seed, ..base.clone() },
        1,
        &mut lip,
    )?;
    let eps_trend = trend(
        cfg,
        &cfg.grid_eps_v,
        |eps_v, seed| InstanceSpec { delta: cfg.delta_fixed, eps_v, seed, ..base.clone() },
        2,
        &mut lip,
    )?;
    let delta_trend_pass = delta_trend
        .windows(2)
        .all(|w| w[1].mean_deviation < w[0].mean_deviation);
    let eps_trend_pass = eps_trend
        .windows(2)
        .all(|w| w[1].mean_deviation >= w[0].mean_deviation);

    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 3, 0));
    let (mut draws, mut held, mut preserved) = (0, 0, 0);
    while held < cfg.margin_instances && draws < cfg.margin_max_draws {
        let spec = InstanceSpec {
            delta: 8.0 * rand::Rng::random::<f64>(&mut rng),
            eps_v: 0.3 * rand::Rng::random::<f64>(&mut rng),
            seed: sub_seed(cfg.seed, 4, draws),
            ..base.clone()
        };
        draws += 1;
        let (_, inst) = modulation_deviation(&build_instance(&spec)?)?;
        let check = margin_preservation_check(&inst.clean_logits, &inst.logits)?;
        if check.premise {
            held += 1;
            preserved += usize::from(check.preserved);
        }
    }
    let margin_pass = held > 0 && preserved == held;
    let n = lip.len().max(1) as f64;
    let mass_bound_pass = mass_bound_violations == 0;
    Ok(TheoryReport {
        config: cfg.clone(),
        mass_bound_vectors: cfg.mass_vectors,
        mass_bound_violations,
        mass_bound_pass,
        delta_trend,
        delta_trend_pass,
        eps_trend,
        eps_trend_pass,
        margin_draws: draws,
        margin_premise_held: held,
        margin_preserved: preserved,
        margin_pass,
        mean_l_mod_hat: lip.iter().map(|l| l.0).sum::<f64>() / n,
        mean_l_h_hat: lip.iter().map(|l| l.1).sum::<f64>() / n,
        pass: mass_bound_pass && delta_trend_pass && eps_trend_pass && margin_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_examples() {
        assert_eq!(attention_margin(&[2.0, 1.5, 0.0], &[0, 1]).unwrap(), 1.5);
        assert_eq!(attention_margin(&[1.0, 1.0], &[0]).unwrap(), 0.0);
        assert!(attention_margin(&[0.0, 3.0], &[0]).unwrap() < 0.0);
        assert!(matches!(attention_margin(&[1.0, 2.0], &[0, 1]), Err(Error::UndefinedMargin(_))));
        assert!(matches!(attention_margin(&[1.0, 2.0], &[]), Err(Error::UndefinedMargin(_))));
        assert!(attention_margin(&[1.0, 2.0], &[5]).is_err());
    }

    #[test]
    fn mass_bound_examples() {
        let r = irrelevant_mass_bound_check(&[5.0, 0.0], &[0]).unwrap();
        let e5 = (-5f64).exp();
        assert!((r.measured - e5 / (1.0 + e5)).abs() < 1e-15);
        assert!((r.measured - 0.00669).abs() < 1e-5);
        assert!((r.bound - 0.00674).abs() < 1e-5);
        assert!(r.holds);
        let r = irrelevant_mass_bound_check(&[0.0, 0.0], &[0]).unwrap();
        assert_eq!((r.measured, r.bound, r.holds), (0.5, 1.0, true));
    }

    #[test]
    fn mass_bound_holds_on_random_vectors() {
        assert_eq!(mass_bound_sweep(7, 100).unwrap(), 0);
    }

    #[test]
    fn lipschitz_examples() {
        let base = Mat::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5]]).unwrap();
        let id = empirical_lipschitz(|x| Ok(x.clone()), &base, 6, 1.0, 1).unwrap();
        assert!((id - 1.0).abs() < 1e-10);
        let three = empirical_lipschitz(|x| Ok(x.scale(3.0)), &base, 6, 1.0, 1).unwrap();
        assert!((three - 3.0).abs() < 1e-10);
        let constant = empirical_lipschitz(|_| Ok(Mat::filled(2, 2, 4.0)), &base, 6, 1.0, 1).unwrap();
        assert_eq!(constant, 0.0);
        assert!(empirical_lipschitz(|x| Ok(x.clone()), &base, 1, 1.0, 1).is_err());
    }

    #[test]
    fn margin_preservation_examples() {
        let c = margin_preservation_check(&[2.0, 0.0], &[1.6, 0.4]).unwrap();
        assert!((c.deviation - 0.4).abs() < 1e-15);
        assert!(c.premise && c.preserved);
        let c = margin_preservation_check(&[2.0, 0.0], &[2.0, 0.0]).unwrap();
        assert!(c.premise && c.preserved);
        let c = margin_preservation_check(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(!c.premise && !c.preserved);
    }

    #[test]
    fn zero_dispersion_without_distractors_has_zero_deviation() {
        let spec = InstanceSpec { eps_v: 0.0, n_informative: 8, tokens: 8, ..InstanceSpec::default() };
        let (dev, inst) = modulation_deviation(&build_instance(&spec).unwrap()).unwrap();
        assert!(dev < 1e-10, "{dev}");
        assert_eq!(inst.c, 0.0);
        assert!(inst.delta.is_infinite());
    }

    #[test]
    fn measured_margin_matches_target() {
        for delta in [0.0, 1.0, 2.5, 4.0] {
            let spec = InstanceSpec { delta, seed: 3, ..InstanceSpec::default() };
            let (_, inst) = modulation_deviation(&build_instance(&spec).unwrap()).unwrap();
            assert!((inst.delta - delta).abs() < 1e-9, "{delta}: {}", inst.delta);
            assert!(inst.c > 0.0 && inst.l_mod_hat > 0.0 && inst.l_h_hat > 0.0);
        }
    }

    #[test]
    fn grids_share_randomness() {
        let a = build_instance(&InstanceSpec { delta: 1.0, eps_v: 0.0, ..InstanceSpec::default() }).unwrap();
        let b = build_instance(&InstanceSpec { delta: 3.0, eps_v: 0.2, ..InstanceSpec::default() }).unwrap();
        assert_eq!(a.context, b.context);
        assert_eq!(a.params.attention.w_v, b.params.attention.w_v);
        assert_eq!(a.visual.row(7), b.visual.row(7));
    }
}
