use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FeatureDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseType {
    Sym,
    Asym,
}

impl NoiseType {
    pub fn name(self) -> &'static str {
        match self {
            NoiseType::Sym => "sym",
            NoiseType::Asym => "asym",
        }
    }
}

impl std::fmt::Display for NoiseType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for NoiseType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sym" | "symmetric" => Ok(NoiseType::Sym),
            "asym" | "asymmetric" | "pair" => Ok(NoiseType::Asym),
            other => Err(Error::Config(format!("unknown noise type `{other}` (sym|asym)"))),
        }
    }
}

fn flip_budget(ds: &FeatureDataset, rate: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("noise rate must lie in [0, 1], got {rate}")));
    }
    if ds.classes() < 2 {
        return Err(Error::Config(format!(
            "label noise needs at least 2 classes, dataset has {}",
            ds.classes()
        )));
    }
    Ok((rate * ds.len() as f64).round() as usize)
}

/// Exactly `round(rate·N)` seeded samples receive a label drawn uniformly
/// from the `K − 1` classes other than their clean label.
pub fn inject_symmetric_noise(ds: &FeatureDataset, rate: f64, seed: u64) -> Result<FeatureDataset> {
    let budget = flip_budget(ds, rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = ds.classes();
    let mut observed = ds.clean_labels().to_vec();
    let mut chosen = index::sample(&mut rng, ds.len(), budget).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let clean = observed[i];
        let offset = rng.random_range(1..k);
        observed[i] = (clean + offset) % k;
    }
    ds.with_observed_labels(observed)
}

/// Exactly `round(rate·N)` seeded samples flip `k → (k + 1) mod K`.
pub fn inject_asymmetric_noise(ds: &FeatureDataset, rate: f64, seed: u64) -> Result<FeatureDataset> {
    let budget = flip_budget(ds, rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = ds.classes();
    let mut observed = ds.clean_labels().to_vec();
    for i in index::sample(&mut rng, ds.len(), budget) {
        observed[i] = (observed[i] + 1) % k;
    }
    ds.with_observed_labels(observed)
}

pub fn inject_noise(
    ds: &FeatureDataset,
    kind: NoiseType,
    rate: f64,
    seed: u64,
) -> Result<FeatureDataset> {
    match kind {
        NoiseType::Sym => inject_symmetric_noise(ds, rate, seed),
        NoiseType::Asym => inject_asymmetric_noise(ds, rate, seed),
    }
}
