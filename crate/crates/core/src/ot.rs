//! Entropic optimal transport between classes and samples, and the
//! reliable/unreliable split derived from the resulting plan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Routing;
use crate::pipeline::argmax;
use crate::tensor::{matmul_nt, softmax_in_place, Mat};

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 1000;
pub const DEFAULT_DELTA_FACTOR: f64 = 0.5;

const COST_FLOOR: f64 = 1e-12;
const MARGINAL_SLACK: f64 = 1e-12;
/// Violation below which Newton polishing takes over from Sinkhorn sweeps.
pub const NEWTON_SWITCH: f64 = 1e-3;
const SWEEPS_BEFORE_NEWTON: usize = 50;
const MIN_SWEEPS_BETWEEN_NEWTON: usize = 5;
const NEWTON_BACKTRACKS: usize = 30;

/// `S[j][i]`: softmax over classes of `cos(t_j, v_i) / τ`. Columns sum to one.
pub fn similarity_matrix(text_feats: &Mat, image_feats: &Mat, tau: f64) -> Result<Mat> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    if text_feats.cols() != image_feats.cols() {
        return Err(Error::dim(
            "similarity_matrix",
            format!("{:?} vs {:?}", text_feats.shape(), image_feats.shape()),
        ));
    }
    // N×L so each row is one sample's class distribution, then transpose.
    let mut per_sample = matmul_nt(image_feats, text_feats)?.scale(1.0 / tau);
    for i in 0..per_sample.rows() {
        softmax_in_place(per_sample.row_mut(i));
    }
    Ok(per_sample.transpose())
}

/// `D = −log S`, with `S` clamped below at `1e-12`.
pub fn cost_matrix(s: &Mat) -> Mat {
    s.map(|x| -x.max(COST_FLOOR).ln())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportProblem {
    pub cost: Mat,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl TransportProblem {
    /// Uniform marginals over classes (rows) and samples (columns).
    pub fn uniform(cost: Mat, epsilon: f64, max_iters: usize, tol: f64) -> Self {
        let (l, n) = cost.shape();
        Self {
            a: vec![1.0 / l as f64; l],
            b: vec![1.0 / n as f64; n],
            cost,
            epsilon,
            max_iters,
            tol,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (l, n) = self.cost.shape();
        if l == 0 || n == 0 {
            return Err(Error::Degenerate("transport problem with no rows or columns".into()));
        }
        if self.a.len() != l || self.b.len() != n {
            return Err(Error::dim(
                "sinkhorn",
                format!(
                    "cost {l}×{n} with marginals of length {} and {}",
                    self.a.len(),
                    self.b.len()
                ),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.cost.as_slice().iter().any(|&c| !c.is_finite() || c < 0.0) {
            return Err(Error::NonFinite("cost must be finite and nonnegative".into()));
        }
        for (name, m) in [("a", &self.a), ("b", &self.b)] {
            if m.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::Config(format!("marginal {name} has a negative entry")));
            }
            let total: f64 = m.iter().sum();
            if (total - 1.0).abs() > MARGINAL_SLACK * m.len().max(1) as f64 {
                return Err(Error::Config(format!("marginal {name} sums to {total}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub pi: Mat,
    pub iters_used: usize,
    /// L1 distance of row sums to `a` plus column sums to `b`.
    pub marginal_violation: f64,
    pub converged: bool,
}

impl TransportPlan {
    pub fn transport_cost(&self, cost: &Mat) -> f64 {
        self.pi
            .as_slice()
            .iter()
            .zip(cost.as_slice())
            .map(|(p, c)| p * c)
            .sum()
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn ln_or_neg_inf(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

fn plan_from_potentials(cost: &Mat, phi: &[f64], psi: &[f64], eps: f64) -> Mat {
    let (l, n) = cost.shape();
    let mut pi = Mat::zeros(l, n);
    for j in 0..l {
        let row = cost.row(j);
        let out = pi.row_mut(j);
        for i in 0..n {
            let e = (phi[j] + psi[i] - row[i]) / eps;
            out[i] = if e == f64::NEG_INFINITY { 0.0 } else { e.exp() };
        }
    }
    pi
}

fn marginal_violation(pi: &Mat, a: &[f64], b: &[f64]) -> f64 {
    let rows: f64 = (0..pi.rows())
        .map(|j| (pi.row(j).iter().sum::<f64>() - a[j]).abs())
        .sum();
    let col_sums = pi.sum_rows();
    let cols: f64 = col_sums
        .as_slice()
        .iter()
        .zip(b)
        .map(|(s, t)| (s - t).abs())
        .sum();
    rows + cols
}

/// Entropic OT by log-domain Sinkhorn sweeps on the dual potentials `φ`
/// (rows) and `ψ` (columns), `Π_ji = exp((φ_j + ψ_i − D_ji) / ε)`.
///
/// Sharp kernels (`D/ε` spanning hundreds of nats) make the Sinkhorn fixed
/// point contract extremely slowly near the solution. Once the violation is
/// below [`NEWTON_SWITCH`] (or the sweep budget for that phase is spent) the
/// solver switches to damped Newton steps on the same dual, solved through
/// the `L×L` Schur complement of the Hessian. Each sweep or Newton step
/// counts as one iteration. A Newton step that fails to reduce the
/// violation hands control back to plain sweeps.
///
/// The returned plan carries `converged = false` when `max_iters` ran out
/// before the violation fell below `tol`.
pub fn sinkhorn(prob: &TransportProblem) -> Result<TransportPlan> {
    prob.validate()?;
    let (l, n) = prob.cost.shape();
    let cost = &prob.cost;
    let eps = prob.epsilon;
    let log_a: Vec<f64> = prob.a.iter().map(|&x| ln_or_neg_inf(x)).collect();
    let log_b: Vec<f64> = prob.b.iter().map(|&x| ln_or_neg_inf(x)).collect();
    let mut phi = vec![0.0; l];
    let mut psi = vec![0.0; n];

    let sweep = |phi: &mut [f64], psi: &mut [f64]| {
        for j in 0..l {
            let row = cost.row(j);
            let lse = log_sum_exp((0..n).map(|i| (psi[i] - row[i]) / eps));
            phi[j] = eps * (log_a[j] - lse);
        }
        for i in 0..n {
            let lse = log_sum_exp((0..l).map(|j| (phi[j] - cost[(j, i)]) / eps));
            psi[i] = eps * (log_b[i] - lse);
        }
    };

    let mut iters = 0;
    let mut sweeps_since_newton = 0;
    let mut pi = plan_from_potentials(cost, &phi, &psi, eps);
    let mut violation = marginal_violation(&pi, &prob.a, &prob.b);
    while violation >= prob.tol && iters < prob.max_iters {
        iters += 1;
        let try_newton = (violation < NEWTON_SWITCH || sweeps_since_newton >= SWEEPS_BEFORE_NEWTON)
            && sweeps_since_newton >= MIN_SWEEPS_BETWEEN_NEWTON;
        let mut stepped = false;
        if try_newton {
            if let Some((p2, s2, pi2, v2)) = newton_step(prob, &phi, &psi, &pi, violation) {
                phi = p2;
                psi = s2;
                pi = pi2;
                violation = v2;
                stepped = true;
            }
        }
        if stepped {
            continue;
        }
        sweep(&mut phi, &mut psi);
        sweeps_since_newton = if try_newton { 0 } else { sweeps_since_newton + 1 };
        pi = plan_from_potentials(cost, &phi, &psi, eps);
        violation = marginal_violation(&pi, &prob.a, &prob.b);
        if !violation.is_finite() {
            return Err(Error::NonFinite("sinkhorn marginal violation".into()));
        }
    }
    Ok(TransportPlan {
        pi,
        iters_used: iters,
        marginal_violation: violation,
        converged: violation < prob.tol,
    })
}

type NewtonOutcome = (Vec<f64>, Vec<f64>, Mat, f64);

/// One damped Newton step on the entropic dual. `None` when the Schur
/// system is singular or no step length reduces the violation.
fn newton_step(
    prob: &TransportProblem,
    phi: &[f64],
    psi: &[f64],
    pi: &Mat,
    violation: f64,
) -> Option<NewtonOutcome> {
    let (l, n) = pi.shape();
    let eps = prob.epsilon;
    let r: Vec<f64> = (0..l).map(|j| pi.row(j).iter().sum()).collect();
    let c = pi.sum_rows().into_vec();
    if c.iter().chain(&r).any(|&x| !(x > 0.0)) {
        return None;
    }
    // Solve [[diag r, Π], [Πᵀ, diag c]] [x; y] = ε [a − r; b − c].
    let p: Vec<f64> = (0..l).map(|j| eps * (prob.a[j] - r[j])).collect();
    let q: Vec<f64> = (0..n).map(|i| eps * (prob.b[i] - c[i])).collect();
    let mut schur = vec![0.0; l * l];
    let mut rhs = p.clone();
    for j in 0..l {
        schur[j * l + j] = r[j];
        let pj = pi.row(j);
        for i in 0..n {
            rhs[j] -= pj[i] * q[i] / c[i];
        }
        for k in j..l {
            let pk = pi.row(k);
            let mut acc = 0.0;
            for i in 0..n {
                acc += pj[i] * pk[i] / c[i];
            }
            schur[j * l + k] -= acc;
            if k != j {
                schur[k * l + j] -= acc;
            }
        }
    }
    // The system has the constant vector as its null direction; pin x_0 = 0.
    let x_rest = solve_spd(&schur, l, 1, &rhs)?;
    let mut x = vec![0.0; l];
    x[1..].copy_from_slice(&x_rest);
    let y: Vec<f64> = (0..n)
        .map(|i| (q[i] - (0..l).map(|j| pi[(j, i)] * x[j]).sum::<f64>()) / c[i])
        .collect();

    let mut t = 1.0;
    for _ in 0..NEWTON_BACKTRACKS {
        let phi2: Vec<f64> = phi.iter().zip(&x).map(|(a, b)| a + t * b).collect();
        let psi2: Vec<f64> = psi.iter().zip(&y).map(|(a, b)| a + t * b).collect();
        let pi2 = plan_from_potentials(&prob.cost, &phi2, &psi2, eps);
        let v2 = marginal_violation(&pi2, &prob.a, &prob.b);
        if v2.is_finite() && v2 < violation {
            return Some((phi2, psi2, pi2, v2));
        }
        t *= 0.5;
    }
    None
}

/// Cholesky solve of the trailing block `A[skip.., skip..] x = b[skip..]`.
fn solve_spd(a: &[f64], n: usize, skip: usize, b: &[f64]) -> Option<Vec<f64>> {
    let m = n - skip;
    let at = |i: usize, j: usize| a[(i + skip) * n + (j + skip)];
    let mut chol = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let mut sum = at(i, j);
            for k in 0..j {
                sum -= chol[i * m + k] * chol[j * m + k];
            }
            if i == j {
                if !(sum > 0.0) {
                    return None;
                }
                chol[i * m + i] = sum.sqrt();
            } else {
                chol[i * m + j] = sum / chol[j * m + j];
            }
        }
    }
    let mut z = vec![0.0; m];
    for i in 0..m {
        let mut sum = b[i + skip];
        for k in 0..i {
            sum -= chol[i * m + k] * z[k];
        }
        z[i] = sum / chol[i * m + i];
    }
    for i in (0..m).rev() {
        let mut sum = z[i];
        for k in i + 1..m {
            sum -= chol[k * m + i] * z[k];
        }
        z[i] = sum / chol[i * m + i];
    }
    Some(z)
}

/// Column-wise argmax of the plan (lowest class index on ties) and the
/// transported mass at that entry.
pub fn pseudo_labels_and_confidences(plan: &TransportPlan) -> (Vec<usize>, Vec<f64>) {
    let pi_t = plan.pi.transpose();
    pi_t.iter_rows()
        .map(|col| {
            let k = argmax(col);
            (k, col[k])
        })
        .unzip()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionResult {
    pub pseudo_labels: Vec<usize>,
    pub confidences: Vec<f64>,
    pub reliable: Vec<usize>,
    pub unreliable: Vec<usize>,
    pub delta: f64,
    pub marginal_violation: f64,
}

impl PartitionResult {
    pub fn len(&self) -> usize {
        self.pseudo_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pseudo_labels.is_empty()
    }

    pub fn routing(&self) -> Routing {
        Routing {
            reliable: self.reliable.clone(),
            unreliable: self.unreliable.clone(),
        }
    }

    /// Fraction of the reliable subset whose observed label is clean.
    /// `None` on an empty reliable subset.
    pub fn precision(&self, noise_mask: &[bool]) -> Option<f64> {
        if self.reliable.is_empty() {
            return None;
        }
        let clean = self.reliable.iter().filter(|&&i| !noise_mask[i]).count();
        Some(clean as f64 / self.reliable.len() as f64)
    }
}

/// `B_x = {i : ŷ_i = y_i and r_i ≥ δ}`, `B_u` the complement.
pub fn partition(
    pseudo_labels: &[usize],
    confidences: &[f64],
    observed_labels: &[usize],
    delta: f64,
) -> Result<PartitionResult> {
    let n = pseudo_labels.len();
    if confidences.len() != n || observed_labels.len() != n {
        return Err(Error::dim(
            "partition",
            format!(
                "{n} pseudo-labels, {} confidences, {} labels",
                confidences.len(),
                observed_labels.len()
            ),
        ));
    }
    let (reliable, unreliable) = (0..n)
        .partition(|&i| pseudo_labels[i] == observed_labels[i] && confidences[i] >= delta);
    Ok(PartitionResult {
        pseudo_labels: pseudo_labels.to_vec(),
        confidences: confidences.to_vec(),
        reliable,
        unreliable,
        delta,
        marginal_violation: 0.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum DeltaRule {
    /// `δ = factor · max_i b_i`.
    Relative(f64),
    Absolute(f64),
}

impl DeltaRule {
    pub fn resolve(&self, b: &[f64]) -> f64 {
        match *self {
            DeltaRule::Relative(f) => f * b.iter().copied().fold(0.0, f64::max),
            DeltaRule::Absolute(d) => d,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornSettings {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub delta: DeltaRule,
}

impl Default for SinkhornSettings {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            delta: DeltaRule::Relative(DEFAULT_DELTA_FACTOR),
        }
    }
}

impl SinkhornSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        match self.delta {
            DeltaRule::Relative(f) | DeltaRule::Absolute(f) if !(f >= 0.0 && f.is_finite()) => {
                Err(Error::Config(format!("delta must be nonnegative, got {f}")))
            }
            _ => Ok(()),
        }
    }
}

/// Similarity, cost, Sinkhorn and split in one call.
pub fn ot_partition(
    text_feats: &Mat,
    image_feats: &Mat,
    tau: f64,
    observed_labels: &[usize],
    settings: &SinkhornSettings,
) -> Result<(PartitionResult, TransportPlan)> {
    settings.validate()?;
    let s = similarity_matrix(text_feats, image_feats, tau)?;
    let prob = TransportProblem::uniform(cost_matrix(&s), settings.epsilon, settings.max_iters, settings.tol);
    let plan = sinkhorn(&prob)?;
    let (labels, conf) = pseudo_labels_and_confidences(&plan);
    let delta = settings.delta.resolve(&prob.b);
    let mut result = partition(&labels, &conf, observed_labels, delta)?;
    result.marginal_violation = plan.marginal_violation;
    Ok((result, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::l2_normalize_rows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(seed: u64, l: usize, n: usize, epsilon: f64) -> TransportProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = l2_normalize_rows(&Mat::randn(l, 6, 1.0, &mut rng)).unwrap();
        let v = l2_normalize_rows(&Mat::randn(n, 6, 1.0, &mut rng)).unwrap();
        let s = similarity_matrix(&t, &v, 0.07).unwrap();
        TransportProblem::uniform(cost_matrix(&s), epsilon, DEFAULT_MAX_ITERS, DEFAULT_TOL)
    }

    #[test]
    fn similarity_examples() {
        let t = Mat::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let v = Mat::from_rows(&[vec![0.6, 0.8], vec![0.0, 1.0]]).unwrap();
        let s = similarity_matrix(&t, &v, 0.5).unwrap();
        assert!(s.as_slice().iter().all(|&x| (x - 0.5).abs() < 1e-15));

        let t = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let v = Mat::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let s = similarity_matrix(&t, &v, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((s[(0, 0)] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s[(0, 0)] - 0.7311).abs() < 1e-4 && (s[(1, 0)] - 0.2689).abs() < 1e-4);
        assert!(matches!(similarity_matrix(&t, &v, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn similarity_columns_sum_to_one() {
        let p = random_problem(3, 7, 40, 0.05);
        let s = p.cost.map(|d| (-d).exp());
        for c in s.sum_rows().as_slice() {
            assert!((c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cost_examples() {
        let s = Mat::from_rows(&[vec![1.0, (-2f64).exp(), 0.0]]).unwrap();
        let d = cost_matrix(&s);
        assert_eq!(d[(0, 0)], 0.0);
        assert!((d[(0, 1)] - 2.0).abs() < 1e-15);
        assert!((d[(0, 2)] + COST_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn product_coupling_on_constant_cost() {
        let cost = Mat::filled(3, 5, 1.7);
        let plan = sinkhorn(&TransportProblem::uniform(cost, 0.05, 1000, 1e-12)).unwrap();
        for x in plan.pi.as_slice() {
            assert!((x - 1.0 / 15.0).abs() < 1e-10);
        }
    }

    #[test]
    fn large_epsilon_approaches_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cost = Mat::from_vec(10, 20, (0..200).map(|_| rng.random::<f64>()).collect()).unwrap();
        let p = TransportProblem::uniform(cost, 100.0, DEFAULT_MAX_ITERS, 1e-12);
        let plan = sinkhorn(&p).unwrap();
        assert!(plan.converged);
        for x in plan.pi.as_slice() {
            assert!((x - 1.0 / 200.0).abs() < 1e-4);
        }
    }

    /// Plain-domain fixed point, run to 10⁴ iterations.
    fn reference_sinkhorn(cost: &Mat, a: &[f64], b: &[f64], eps: f64) -> Mat {
        let k = cost.map(|c| (-c / eps).exp());
        let (l, n) = k.shape();
        let mut u = vec![1.0; l];
        let mut v = vec![1.0; n];
        for _ in 0..10_000 {
            for j in 0..l {
                u[j] = a[j] / (0..n).map(|i| k[(j, i)] * v[i]).sum::<f64>();
            }
            for i in 0..n {
                v[i] = b[i] / (0..l).map(|j| k[(j, i)] * u[j]).sum::<f64>();
            }
        }
        let mut pi = Mat::zeros(l, n);
        for j in 0..l {
            for i in 0..n {
                pi.row_mut(j)[i] = u[j] * k[(j, i)] * v[i];
            }
        }
        pi
    }

    #[test]
    fn anti_diagonal_two_by_two() {
        let cost = Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let prob = TransportProblem::uniform(cost.clone(), 0.1, 10_000, 1e-15);
        let plan = sinkhorn(&prob).unwrap();
        let oracle = reference_sinkhorn(&cost, &[0.5, 0.5], &[0.5, 0.5], 0.1);
        let closed = 0.5 / (1.0 + (-10f64).exp());
        for j in 0..2 {
            for i in 0..2 {
                assert!((plan.pi[(j, i)] - oracle[(j, i)]).abs() < 1e-9);
            }
            assert!((plan.pi[(j, j)] - closed).abs() < 1e-9);
            assert!(plan.pi[(j, j)] > 0.4999);
        }
        let (labels, _) = pseudo_labels_and_confidences(&plan);
        assert_eq!(labels, vec![0, 1]);
    }

    #[test]
    fn marginals_on_random_problems() {
        for seed in 0..50 {
            let l = 2 + seed as usize % 9;
            let n = l + (seed as usize * 37) % (201 - l);
            let plan = sinkhorn(&random_problem(seed, l, n, DEFAULT_EPSILON)).unwrap();
            assert!(plan.converged, "seed {seed}: {}", plan.marginal_violation);
            assert!(plan.pi.as_slice().iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn non_convergence_is_flagged() {
        let mut p = random_problem(2, 10, 100, 0.01);
        p.max_iters = 1;
        let plan = sinkhorn(&p).unwrap();
        assert!(!plan.converged);
        assert_eq!(plan.iters_used, 1);
        assert!(plan.marginal_violation >= p.tol);
    }

    #[test]
    fn transport_cost_non_decreasing_in_epsilon() {
        let base = random_problem(5, 6, 50, 0.01);
        let mut last = f64::NEG_INFINITY;
        for eps in [0.01, 0.05, 0.1, 1.0] {
            let mut p = base.clone();
            p.epsilon = eps;
            p.max_iters = 20_000;
            let plan = sinkhorn(&p).unwrap();
            let c = plan.transport_cost(&p.cost);
            assert!(c >= last - 1e-9, "eps {eps}: {c} < {last}");
            last = c;
        }
    }

    #[test]
    fn permutation_equivariance() {
        let p = random_problem(8, 5, 30, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut perm: Vec<usize> = (0..30).collect();
        for i in (1..30).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut permuted = Mat::zeros(5, 30);
        for j in 0..5 {
            for (new, &old) in perm.iter().enumerate() {
                permuted.row_mut(j)[new] = p.cost[(j, old)];
            }
        }
        let q = TransportProblem::uniform(permuted, 0.05, p.max_iters, p.tol);
        let a = sinkhorn(&p).unwrap();
        let b = sinkhorn(&q).unwrap();
        for j in 0..5 {
            for (new, &old) in perm.iter().enumerate() {
                assert!((a.pi[(j, old)] - b.pi[(j, new)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_problems_rejected() {
        let mut p = random_problem(1, 3, 4, 0.05);
        p.epsilon = 0.0;
        assert!(matches!(sinkhorn(&p), Err(Error::Config(_))));
        let mut p = random_problem(1, 3, 4, 0.05);
        p.a = vec![0.5, 0.5, 0.5];
        assert!(matches!(sinkhorn(&p), Err(Error::Config(_))));
        let mut p = random_problem(1, 3, 4, 0.05);
        p.cost.as_mut_slice()[0] = -1.0;
        assert!(sinkhorn(&p).is_err());
    }

    #[test]
    fn pseudo_label_examples() {
        let n = 4;
        let mut pi = Mat::zeros(3, n);
        let hot = [2, 0, 1, 2];
        for (i, &k) in hot.iter().enumerate() {
            pi.row_mut(k)[i] = 1.0 / n as f64;
        }
        let plan = TransportPlan { pi, iters_used: 0, marginal_violation: 0.0, converged: true };
        let (y, r) = pseudo_labels_and_confidences(&plan);
        assert_eq!(y, hot.to_vec());
        assert!(r.iter().all(|&x| x == 0.25));

        let plan = TransportPlan {
            pi: Mat::filled(3, n, 1.0 / 12.0),
            iters_used: 0,
            marginal_violation: 0.0,
            converged: true,
        };
        let (y, r) = pseudo_labels_and_confidences(&plan);
        assert!(y.iter().all(|&k| k == 0));
        assert!(r.iter().all(|&x| x == 1.0 / 12.0));
    }

    #[test]
    fn partition_examples() {
        let n = 4;
        let r = vec![1.0 / n as f64; n];
        let delta = DeltaRule::Relative(0.5).resolve(&[0.25; 4]);
        assert_eq!(delta, 0.125);
        let all = partition(&[0, 1, 2, 0], &r, &[0, 1, 2, 0], delta).unwrap();
        assert_eq!(all.reliable, vec![0, 1, 2, 3]);
        assert!(all.unreliable.is_empty());
        let none = partition(&[1, 2, 0, 1], &[1.0; 4], &[0, 1, 2, 0], 0.0).unwrap();
        assert!(none.reliable.is_empty());
        let mixed = partition(&[0, 1, 2], &[0.5, 0.1, 0.5], &[0, 1, 0], 0.3).unwrap();
        assert_eq!(mixed.reliable, vec![0]);
        assert_eq!(mixed.unreliable, vec![1, 2]);
        mixed.routing().check_cover(3).unwrap();
        assert_eq!(mixed.precision(&[false, false, true]), Some(1.0));
        assert!(partition(&[0], &[0.1, 0.2], &[0], 0.0).is_err());
    }

    #[test]
    fn partition_json_fields() {
        let p = partition(&[0, 1], &[0.5, 0.1], &[0, 0], 0.25).unwrap();
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        for key in ["pseudo_labels", "confidences", "reliable", "unreliable", "delta", "marginal_violation"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
