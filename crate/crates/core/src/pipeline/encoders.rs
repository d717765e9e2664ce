//! Frozen stand-ins for the pretrained text and image towers.
//!
//! The text tower mean-pools `[context; class token]`, applies a fixed linear
//! map and L2-normalizes. The image tower mean-pools the visual tokens,
//! applies a fixed linear map and L2-normalizes. Both maps have orthonormal
//! columns. Nothing here is ever updated by training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ModelDims;
use crate::error::{Error, Result};
use crate::tensor::{dot, matmul, Mat};

/// Default softmax temperature for cosine logits.
pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenEncoders {
    /// `K x d` class-name token embeddings.
    pub class_embed: Mat,
    /// `d x d_s` text projection.
    pub text_proj: Mat,
    /// `d_v x d_s` image projection.
    pub image_proj: Mat,
    pub tau: f64,
    pub seed: u64,
}

/// Random matrix with orthonormal columns (or rows, when wider than tall),
/// via modified Gram-Schmidt on a seeded Gaussian.
fn random_isometry(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    if rows < cols {
        return random_isometry(cols, rows, rng).transpose();
    }
    let g = Mat::randn(cols, rows, 1.0, rng);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for row in g.iter_rows() {
        let mut v = row.to_vec();
        for b in &basis {
            let p = dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let n = dot(&v, &v).sqrt();
        for x in v.iter_mut() {
            *x /= n;
        }
        basis.push(v);
    }
    let mut out = Mat::zeros(rows, cols);
    for (j, b) in basis.iter().enumerate() {
        for (i, &v) in b.iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

fn unit(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

impl FrozenEncoders {
    /// Seeded encoders whose class tokens carry no information about any
    /// dataset (zero-shot accuracy at chance).
    pub fn random(dims: &ModelDims, tau: f64, seed: u64) -> Result<Self> {
        check_tau(tau)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text_proj = random_isometry(dims.d, dims.d_s, &mut rng);
        let image_proj = random_isometry(dims.d_v, dims.d_s, &mut rng);
        let mut class_embed = Mat::randn(dims.classes, dims.d, 1.0, &mut rng);
        let target = (dims.d as f64).sqrt();
        for k in 0..dims.classes {
            let row = class_embed.row_mut(k);
            unit(row);
            row.iter_mut().for_each(|v| *v *= target);
        }
        Ok(Self {
            class_embed,
            text_proj,
            image_proj,
            tau,
            seed,
        })
    }

    /// Seeded encoders whose class tokens are partially aligned with given
    /// per-class visual anchors (`K x d_v`), simulating a pretrained shared
    /// space.
    ///
    /// The text feature of class `k` under an empty context is
    /// `normalize(sqrt(f) * a_k + sqrt(1 - f) * r_k)`, where `a_k` is the
    /// image-tower embedding of anchor `k`, `r_k` a random unit vector and
    /// `f` the `fidelity` in `[0, 1]`.
    pub fn anchored(
        dims: &ModelDims,
        tau: f64,
        seed: u64,
        anchors: &Mat,
        fidelity: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&fidelity) {
            return Err(Error::Config(format!(
                "zero-shot fidelity must lie in [0, 1], got {fidelity}"
            )));
        }
        if anchors.shape() != (dims.classes, dims.d_v) {
            return Err(Error::dim(
                "FrozenEncoders::anchored",
                format!(
                    "anchors are {}x{}, expected {}x{}",
                    anchors.rows(),
                    anchors.cols(),
                    dims.classes,
                    dims.d_v
                ),
            ));
        }
        let mut enc = Self::random(dims, tau, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a11e);
        let noise = Mat::randn(dims.classes, dims.d_s, 1.0, &mut rng);
        let embedded = matmul(anchors, &enc.image_proj)?;
        let scale = (dims.d as f64).sqrt();
        let (wa, wr) = (fidelity.sqrt(), (1.0 - fidelity).sqrt());
        for k in 0..dims.classes {
            let mut a = embedded.row(k).to_vec();
            unit(&mut a);
            let mut r = noise.row(k).to_vec();
            unit(&mut r);
            let mut t: Vec<f64> = a.iter().zip(&r).map(|(x, y)| wa * x + wr * y).collect();
            unit(&mut t);
            // text_proj has orthonormal columns, so e = t · text_projᵀ maps
            // back onto t exactly.
            let t = Mat::row_vector(&t);
            let e = crate::tensor::matmul_nt(&t, &enc.text_proj)?;
            let mut e = e.into_vec();
            unit(&mut e);
            for (dst, v) in enc.class_embed.row_mut(k).iter_mut().zip(&e) {
                *dst = v * scale;
            }
        }
        Ok(enc)
    }

    pub fn classes(&self) -> usize {
        self.class_embed.rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.class_embed.len() + self.text_proj.len() + self.image_proj.len()
    }

    /// Stable bytes of every frozen tensor, for immutability checks.
    pub fn fingerprint(&self) -> Vec<u8> {
        [&self.class_embed, &self.text_proj, &self.image_proj]
            .iter()
            .flat_map(|m| m.as_slice().iter().flat_map(|v| v.to_le_bytes()))
            .chain(self.tau.to_le_bytes())
            .collect()
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}
