//! Feature datasets: synthetic generation, label corruption, few-shot
//! sampling and the VPFT binary format.

mod format;
mod noise;
mod synthetic;

pub use format::{load_features, read_features, save_features, write_features, VPFT_MAGIC, VPFT_VERSION};
pub use noise::{inject_asymmetric_noise, inject_noise, inject_symmetric_noise, NoiseType};
pub use synthetic::{generate_synthetic, synthetic_test_set, SyntheticSpec, DISTRACTOR_MAX_ABS_COS, REJECTION_BUDGET};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Provenance {
    Synthetic { seed: u64, spec: SyntheticSpec },
    Ingested { path: String },
}

/// `N` samples of `M` visual tokens of width `d_v`, with clean and observed
/// labels. Tokens are stored in 32-bit precision, matching the file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDataset {
    n: usize,
    m: usize,
    d_v: usize,
    k: usize,
    tokens: Vec<f32>,
    clean_labels: Vec<usize>,
    observed_labels: Vec<usize>,
    noise_mask: Vec<bool>,
    pub provenance: Provenance,
}

impl FeatureDataset {
    pub fn new(
        m: usize,
        d_v: usize,
        k: usize,
        tokens: Vec<f32>,
        clean_labels: Vec<usize>,
        observed_labels: Vec<usize>,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = clean_labels.len();
        if observed_labels.len() != n {
            return Err(Error::dim(
                "FeatureDataset::new",
                format!("{n} clean labels but {} observed", observed_labels.len()),
            ));
        }
        if tokens.len() != n * m * d_v {
            return Err(Error::dim(
                "FeatureDataset::new",
                format!("{} token values for {n}x{m}x{d_v}", tokens.len()),
            ));
        }
        if let Some(&bad) = clean_labels.iter().chain(&observed_labels).find(|&&y| y >= k) {
            return Err(Error::IndexOutOfRange { index: bad, len: k });
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset tokens".into()));
        }
        let noise_mask = clean_labels
            .iter()
            .zip(&observed_labels)
            .map(|(c, o)| c != o)
            .collect();
        Ok(Self {
            n,
            m,
            d_v,
            k,
            tokens,
            clean_labels,
            observed_labels,
            noise_mask,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.m
    }

    pub fn token_dim(&self) -> usize {
        self.d_v
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn raw_tokens(&self) -> &[f32] {
        &self.tokens
    }

    pub fn clean_labels(&self) -> &[usize] {
        &self.clean_labels
    }

    pub fn observed_labels(&self) -> &[usize] {
        &self.observed_labels
    }

    pub fn noise_mask(&self) -> &[bool] {
        &self.noise_mask
    }

    /// Sample `i` as an `M x d_v` matrix.
    pub fn sample(&self, i: usize) -> Result<Mat> {
        if i >= self.n {
            return Err(Error::IndexOutOfRange { index: i, len: self.n });
        }
        let stride = self.m * self.d_v;
        let data = self.tokens[i * stride..(i + 1) * stride]
            .iter()
            .map(|&v| v as f64)
            .collect();
        Mat::from_vec(self.m, self.d_v, data)
    }

    pub fn samples(&self) -> Result<Vec<Mat>> {
        (0..self.n).map(|i| self.sample(i)).collect()
    }

    pub fn noisy_count(&self) -> usize {
        self.noise_mask.iter().filter(|&&b| b).count()
    }

    pub fn realized_noise_rate(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.noisy_count() as f64 / self.n as f64
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &y in &self.clean_labels {
            counts[y] += 1;
        }
        counts
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let stride = self.m * self.d_v;
        let mut tokens = Vec::with_capacity(indices.len() * stride);
        let mut clean = Vec::with_capacity(indices.len());
        let mut observed = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n {
                return Err(Error::IndexOutOfRange { index: i, len: self.n });
            }
            tokens.extend_from_slice(&self.tokens[i * stride..(i + 1) * stride]);
            clean.push(self.clean_labels[i]);
            observed.push(self.observed_labels[i]);
        }
        Self::new(self.m, self.d_v, self.k, tokens, clean, observed, self.provenance.clone())
    }

    /// Copy with replaced observed labels; the noise mask is recomputed.
    pub fn with_observed_labels(&self, observed: Vec<usize>) -> Result<Self> {
        Self::new(
            self.m,
            self.d_v,
            self.k,
            self.tokens.clone(),
            self.clean_labels.clone(),
            observed,
            self.provenance.clone(),
        )
    }

    /// Per-class mean of the mean-pooled tokens, grouped by observed label
    /// (`K x d_v`). Classes with no samples get a zero row.
    pub fn observed_centroids(&self) -> Result<Mat> {
        let mut out = Mat::zeros(self.k, self.d_v);
        let mut counts = vec![0usize; self.k];
        for i in 0..self.n {
            let pooled = self.sample(i)?.mean_rows();
            let y = self.observed_labels[i];
            counts[y] += 1;
            for (dst, v) in out.row_mut(y).iter_mut().zip(pooled.as_slice()) {
                *dst += v;
            }
        }
        for (k, &c) in counts.iter().enumerate() {
            if c > 0 {
                out.row_mut(k).iter_mut().for_each(|v| *v /= c as f64);
            }
        }
        Ok(out)
    }
}

fn per_class_choice(ds: &FeatureDataset, shots: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut by_class = vec![Vec::new(); ds.classes()];
    for (i, &y) in ds.clean_labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    by_class
        .iter()
        .enumerate()
        .map(|(class, members)| {
            if members.len() < shots {
                return Err(Error::InsufficientClass {
                    class,
                    available: members.len(),
                    requested: shots,
                });
            }
            let mut picked: Vec<usize> = index::sample(&mut rng, members.len(), shots)
                .into_iter()
                .map(|j| members[j])
                .collect();
            picked.sort_unstable();
            Ok(picked)
        })
        .collect()
}

/// Exactly `shots` samples per clean class, chosen uniformly with a seeded
/// stream; kept in their original order.
pub fn few_shot_sample(ds: &FeatureDataset, shots: usize, seed: u64) -> Result<FeatureDataset> {
    few_shot_split(ds, shots, seed).map(|(train, _)| train)
}

/// [`few_shot_sample`] plus the samples it left out, as a held-out set.
pub fn few_shot_split(
    ds: &FeatureDataset,
    shots: usize,
    seed: u64,
) -> Result<(FeatureDataset, FeatureDataset)> {
    let chosen = per_class_choice(ds, shots, seed)?;
    let mut picked = vec![false; ds.len()];
    let mut train: Vec<usize> = chosen.into_iter().flatten().collect();
    train.sort_unstable();
    for &i in &train {
        picked[i] = true;
    }
    let rest: Vec<usize> = (0..ds.len()).filter(|&i| !picked[i]).collect();
    Ok((ds.subset(&train)?, ds.subset(&rest)?))
}
