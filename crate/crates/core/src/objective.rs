//! Subset-routed training objective: cross-entropy on the reliable subset,
//! generalized cross-entropy on the unreliable one, mixed by `α`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Probabilities are clamped to this floor before `log` and powers.
pub const PROB_FLOOR: f64 = 1e-12;

pub const DEFAULT_Q: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum AlphaMode {
    /// `α = |B_x| / (|B_x| + |B_u|)`.
    Adaptive,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub q: f64,
    pub alpha: AlphaMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            q: DEFAULT_Q,
            alpha: AlphaMode::Adaptive,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_q(self.q)?;
        if let AlphaMode::Fixed(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("alpha must lie in [0, 1], got {a}")));
            }
        }
        Ok(())
    }
}

fn check_q(q: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("q must lie in (0, 1], got {q}")));
    }
    Ok(())
}

/// Which samples go to which loss term.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Routing {
    pub reliable: Vec<usize>,
    pub unreliable: Vec<usize>,
}

impl Routing {
    pub fn all_reliable(n: usize) -> Self {
        Self {
            reliable: (0..n).collect(),
            unreliable: Vec::new(),
        }
    }

    pub fn all_unreliable(n: usize) -> Self {
        Self {
            reliable: Vec::new(),
            unreliable: (0..n).collect(),
        }
    }

    /// Checks that the two subsets are a disjoint cover of `0..n`.
    pub fn check_cover(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.reliable.iter().chain(&self.unreliable) {
            match seen.get_mut(i) {
                None => {
                    return Err(Error::Partition(format!(
                        "index {i} outside a batch of {n}"
                    )))
                }
                Some(true) => return Err(Error::Partition(format!("index {i} appears twice"))),
                Some(s) => *s = true,
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Partition(format!("index {missing} is not covered")));
        }
        Ok(())
    }

    pub fn alpha(&self, mode: AlphaMode) -> f64 {
        match mode {
            AlphaMode::Fixed(a) => a,
            AlphaMode::Adaptive => {
                let total = self.reliable.len() + self.unreliable.len();
                if total == 0 {
                    0.0
                } else {
                    self.reliable.len() as f64 / total as f64
                }
            }
        }
    }
}

/// A loss value plus how many probabilities hit [`PROB_FLOOR`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub clamped: usize,
}

fn label_prob(probs: &Mat, labels: &[usize], i: usize) -> Result<(f64, bool)> {
    if i >= probs.rows() || i >= labels.len() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: probs.rows().min(labels.len()),
        });
    }
    let y = labels[i];
    if y >= probs.cols() {
        return Err(Error::IndexOutOfRange {
            index: y,
            len: probs.cols(),
        });
    }
    let p = probs[(i, y)];
    Ok(if p < PROB_FLOOR {
        (PROB_FLOOR, true)
    } else {
        (p, false)
    })
}

/// `−(1/|B|) Σ_{i∈B} log p_{i,y_i}`; zero on an empty subset.
pub fn cross_entropy_loss(probs: &Mat, labels: &[usize], subset: &[usize]) -> Result<LossTerm> {
    let mut term = LossTerm::default();
    if subset.is_empty() {
        return Ok(term);
    }
    for &i in subset {
        let (p, clamped) = label_prob(probs, labels, i)?;
        term.value -= p.ln();
        term.clamped += clamped as usize;
    }
    term.value /= subset.len() as f64;
    Ok(term)
}

/// `(1/|B|) Σ_{i∈B} (1 − p_{i,y_i}^q) / q`; zero on an empty subset.
pub fn gce_loss(probs: &Mat, labels: &[usize], subset: &[usize], q: f64) -> Result<LossTerm> {
    check_q(q)?;
    let mut term = LossTerm::default();
    if subset.is_empty() {
        return Ok(term);
    }
    for &i in subset {
        let (p, clamped) = label_prob(probs, labels, i)?;
        term.value += (1.0 - p.powf(q)) / q;
        term.clamped += clamped as usize;
    }
    term.value /= subset.len() as f64;
    Ok(term)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustLoss {
    pub value: f64,
    pub ce: f64,
    pub gce: f64,
    pub alpha: f64,
    pub clamped: usize,
}

/// `α·L_CE(B_x) + (1 − α)·L_GCE(B_u)`.
pub fn robust_loss(
    probs: &Mat,
    labels: &[usize],
    routing: &Routing,
    cfg: &LossConfig,
) -> Result<RobustLoss> {
    cfg.validate()?;
    routing.check_cover(probs.rows())?;
    let ce = cross_entropy_loss(probs, labels, &routing.reliable)?;
    let gce = gce_loss(probs, labels, &routing.unreliable, cfg.q)?;
    let alpha = routing.alpha(cfg.alpha);
    Ok(RobustLoss {
        value: alpha * ce.value + (1.0 - alpha) * gce.value,
        ce: ce.value,
        gce: gce.value,
        alpha,
        clamped: ce.clamped + gce.clamped,
    })
}

/// `∂L/∂probs` for [`robust_loss`]; nonzero only at each sample's label.
pub fn loss_gradient(
    probs: &Mat,
    labels: &[usize],
    routing: &Routing,
    cfg: &LossConfig,
) -> Result<Mat> {
    cfg.validate()?;
    routing.check_cover(probs.rows())?;
    let alpha = routing.alpha(cfg.alpha);
    let mut grad = Mat::zeros(probs.rows(), probs.cols());
    let nx = routing.reliable.len() as f64;
    for &i in &routing.reliable {
        let (p, _) = label_prob(probs, labels, i)?;
        grad[(i, labels[i])] = -alpha / (nx * p);
    }
    let nu = routing.unreliable.len() as f64;
    for &i in &routing.unreliable {
        let (p, _) = label_prob(probs, labels, i)?;
        grad[(i, labels[i])] = -(1.0 - alpha) * p.powf(cfg.q - 1.0) / nu;
    }
    Ok(grad)
}
