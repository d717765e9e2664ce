use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureDataset, Provenance};
use crate::error::{Error, Result};
use crate::tensor::{dot, Mat};

/// Distractor tokens must satisfy `|cos(x, μ_k)| < 0.3` for every prototype.
pub const DISTRACTOR_MAX_ABS_COS: f64 = 0.3;
/// Draws allowed per distractor token before giving up.
pub const REJECTION_BUDGET: usize = 1000;

const PROTOTYPE_STREAM: u64 = 0;
const SAMPLE_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// Class-prototype token structure: each sample holds `n_informative`
/// tokens near its class prototype and `tokens - n_informative` distractors
/// decorrelated from every prototype.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub tokens: usize,
    pub dim: usize,
    pub n_informative: usize,
    /// Length of the perturbation added to the prototype before
    /// renormalizing, in prototype units.
    pub eps_v: f64,
    /// Norm of every distractor token.
    pub margin_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 16,
            tokens: 8,
            dim: 48,
            n_informative: 5,
            eps_v: 0.1,
            margin_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.dim == 0 || self.tokens == 0 {
            return Err(Error::Config("classes, tokens and dim must be positive".into()));
        }
        if self.n_informative == 0 || self.n_informative > self.tokens {
            return Err(Error::Config(format!(
                "n_informative must lie in [1, {}], got {}",
                self.tokens, self.n_informative
            )));
        }
        if !(self.eps_v >= 0.0 && self.eps_v.is_finite()) {
            return Err(Error::Config(format!("eps_v must be >= 0, got {}", self.eps_v)));
        }
        if !(self.margin_scale > 0.0 && self.margin_scale.is_finite()) {
            return Err(Error::Config(format!(
                "margin_scale must be > 0, got {}",
                self.margin_scale
            )));
        }
        Ok(())
    }

    /// The `K x d_v` unit-norm class prototypes; a pure function of the seed.
    pub fn prototypes(&self) -> Result<Mat> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(PROTOTYPE_STREAM);
        let mut out = Mat::zeros(self.classes, self.dim);
        for k in 0..self.classes {
            let v = random_unit(self.dim, &mut rng);
            out.row_mut(k).copy_from_slice(&v);
        }
        Ok(out)
    }
}

fn gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut v = gaussian(dim, rng);
        if dot(&v, &v) > 0.0 {
            normalize(&mut v);
            return v;
        }
    }
}

/// `normalize(μ + ε_v·g/√d_v)`, `g` standard normal.
fn informative_token(mu: &[f64], eps_v: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = eps_v / (mu.len() as f64).sqrt();
    let g = gaussian(mu.len(), rng);
    let mut v: Vec<f64> = mu.iter().zip(&g).map(|(m, z)| m + scale * z).collect();
    normalize(&mut v);
    v
}

fn distractor_token(prototypes: &Mat, scale: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    for _ in 0..REJECTION_BUDGET {
        let v = random_unit(prototypes.cols(), rng);
        if prototypes
            .iter_rows()
            .all(|mu| dot(mu, &v).abs() < DISTRACTOR_MAX_ABS_COS)
        {
            return Ok(v.into_iter().map(|x| x * scale).collect());
        }
    }
    Err(Error::Generation(format!(
        "no distractor with |cos| < {DISTRACTOR_MAX_ABS_COS} against {} prototypes after {REJECTION_BUDGET} draws in dimension {}; use a larger token dimension",
        prototypes.rows(),
        prototypes.cols()
    )))
}

/// Class-major synthetic dataset with clean observed labels. Informative
/// tokens occupy the first `n_informative` slots of every sample.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureDataset> {
    generate_from_stream(spec, spec.per_class, SAMPLE_STREAM)
}

/// Fresh samples around the same prototypes as [`generate_synthetic`],
/// drawn from an independent stream, for held-out evaluation.
pub fn synthetic_test_set(spec: &SyntheticSpec, per_class: usize) -> Result<FeatureDataset> {
    generate_from_stream(spec, per_class, TEST_STREAM)
}

fn generate_from_stream(spec: &SyntheticSpec, per_class: usize, stream: u64) -> Result<FeatureDataset> {
    let prototypes = spec.prototypes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let n = spec.classes * per_class;
    let mut tokens = Vec::with_capacity(n * spec.tokens * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..spec.classes {
        let mu = prototypes.row(k);
        for _ in 0..per_class {
            for t in 0..spec.tokens {
                let v = if t < spec.n_informative {
                    informative_token(mu, spec.eps_v, &mut rng)
                } else {
                    distractor_token(&prototypes, spec.margin_scale, &mut rng)?
                };
                tokens.extend(v.into_iter().map(|x| x as f32));
            }
            labels.push(k);
        }
    }
    FeatureDataset::new(
        spec.tokens,
        spec.dim,
        spec.classes,
        tokens,
        labels.clone(),
        labels,
        Provenance::Synthetic {
            seed: spec.seed,
            spec: spec.clone(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dispersion_all_informative_reproduces_prototypes() {
        let spec = SyntheticSpec {
            classes: 3,
            per_class: 2,
            tokens: 4,
            n_informative: 4,
            eps_v: 0.0,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let protos = spec.prototypes().unwrap();
        for i in 0..ds.len() {
            let k = ds.clean_labels()[i];
            let x = ds.sample(i).unwrap();
            for row in x.iter_rows() {
                for (a, b) in row.iter().zip(protos.row(k)) {
                    assert_eq!(*a, *b as f32 as f64);
                }
            }
        }
    }

    #[test]
    fn sizes_and_clean_labels() {
        let spec = SyntheticSpec { classes: 2, per_class: 8, ..SyntheticSpec::default() };
        let ds = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.len(), 16);
        assert!(ds.noise_mask().iter().all(|&b| !b));
        assert_eq!(ds.observed_labels(), ds.clean_labels());
    }

    #[test]
    fn informative_tokens_stay_near_prototype() {
        let eps_v = 0.3;
        let spec = SyntheticSpec {
            classes: 2,
            per_class: 100,
            tokens: 10,
            n_informative: 10,
            eps_v,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let protos = spec.prototypes().unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..ds.len() {
            let mu = protos.row(ds.clean_labels()[i]);
            for row in ds.sample(i).unwrap().iter_rows() {
                total += dot(row, mu);
                count += 1;
            }
        }
        assert_eq!(count, 2000);
        let bound = 1.0 / (1.0 + eps_v * eps_v).sqrt() - 0.05;
        assert!(total / count as f64 >= bound, "{} < {bound}", total / count as f64);
    }

    #[test]
    fn distractors_are_decorrelated_and_scaled() {
        let spec = SyntheticSpec { margin_scale: 2.0, ..SyntheticSpec::default() };
        let ds = generate_synthetic(&spec).unwrap();
        let protos = spec.prototypes().unwrap();
        for i in 0..ds.len() {
            let x = ds.sample(i).unwrap();
            for row in x.iter_rows().skip(spec.n_informative) {
                let norm = dot(row, row).sqrt();
                assert!((norm - 2.0).abs() < 1e-5);
                for mu in protos.iter_rows() {
                    assert!((dot(row, mu) / norm).abs() < DISTRACTOR_MAX_ABS_COS + 1e-6);
                }
            }
        }
    }

    #[test]
    fn rejection_budget_exhaustion_is_reported() {
        // In two dimensions, 16 prototypes leave no room for a distractor.
        let spec = SyntheticSpec { classes: 16, dim: 2, ..SyntheticSpec::default() };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn test_set_shares_prototypes_but_not_samples() {
        let spec = SyntheticSpec { classes: 3, per_class: 4, ..SyntheticSpec::default() };
        let train = generate_synthetic(&spec).unwrap();
        let test = synthetic_test_set(&spec, 5).unwrap();
        assert_eq!(test.len(), 15);
        assert_ne!(train.sample(0).unwrap(), test.sample(0).unwrap());
        let protos = spec.prototypes().unwrap();
        let first = test.sample(5).unwrap();
        assert!(dot(first.row(0), protos.row(1)) > 0.9);
    }

    #[test]
    fn seed_determinism() {
        let spec = SyntheticSpec { seed: 42, ..SyntheticSpec::default() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.raw_tokens(), c.raw_tokens());
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SyntheticSpec { n_informative: 0, ..SyntheticSpec::default() },
            SyntheticSpec { n_informative: 9, ..SyntheticSpec::default() },
            SyntheticSpec { eps_v: -0.1, ..SyntheticSpec::default() },
            SyntheticSpec { classes: 0, ..SyntheticSpec::default() },
        ] {
            assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
        }
    }
}
