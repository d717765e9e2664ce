use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Standard deviation of the Gaussian used to initialize context tokens.
pub const CONTEXT_INIT_STD: f64 = 0.02;

/// Gate pre-activation bias at initialization. A strongly negative bias
/// starts the residual gate almost closed, so an untrained full pipeline
/// behaves like the text-only prompt.
pub const GATE_BIAS_INIT: f64 = -4.0;

/// Shape of the prompt pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Prompt embedding width.
    pub d: usize,
    /// Visual token width.
    pub d_v: usize,
    /// Shared image/text space width.
    pub d_s: usize,
    pub n_ctx: usize,
    pub heads: usize,
    /// FFN hidden width.
    pub d_ff: usize,
    pub classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d: 32,
            d_v: 48,
            d_s: 24,
            n_ctx: 16,
            heads: 8,
            d_ff: 64,
            classes: 10,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("d_v", self.d_v),
            ("d_s", self.d_s),
            ("n_ctx", self.n_ctx),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d < 2 {
            return Err(Error::Config("layer norm needs d >= 2".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide d ({})",
                self.heads, self.d
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    ClassShared,
    ClassSpecific,
}

/// Which parts of the vision-guided modulation are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Text-only prompt; the context is used as is.
    NoVision,
    /// Cross-modal attention added residually, no FiLM and no gate.
    VisionNoFilm,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::NoVision, Variant::VisionNoFilm, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoVision => "no-vision",
            Variant::VisionNoFilm => "vision-no-film",
            Variant::Full => "full",
        }
    }

    pub fn uses_vision(self) -> bool {
        self != Variant::NoVision
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-vision" => Ok(Variant::NoVision),
            "vision-no-film" => Ok(Variant::VisionNoFilm),
            "full" => Ok(Variant::Full),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// Learnable prompt context: one `n_ctx x d` block shared by all classes, or
/// one block per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextBank {
    pub mode: ContextMode,
    pub n_ctx: usize,
    pub d: usize,
    pub tokens: Vec<Mat>,
}

impl ContextBank {
    pub fn init<R: Rng + ?Sized>(mode: ContextMode, dims: &ModelDims, rng: &mut R) -> Self {
        let blocks = match mode {
            ContextMode::ClassShared => 1,
            ContextMode::ClassSpecific => dims.classes,
        };
        let tokens = (0..blocks)
            .map(|_| Mat::randn(dims.n_ctx, dims.d, CONTEXT_INIT_STD, rng))
            .collect();
        Self {
            mode,
            n_ctx: dims.n_ctx,
            d: dims.d,
            tokens,
        }
    }

    /// Context block used for class `k`.
    pub fn block_for_class(&self, k: usize) -> &Mat {
        match self.mode {
            ContextMode::ClassShared => &self.tokens[0],
            ContextMode::ClassSpecific => &self.tokens[k],
        }
    }

    /// Index of the block used for class `k`.
    pub fn block_index(&self, k: usize) -> usize {
        match self.mode {
            ContextMode::ClassShared => 0,
            ContextMode::ClassSpecific => k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    pub heads: usize,
}

/// The three per-token linear maps driven by the attention output: FiLM
/// scale, FiLM shift and gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilmParams {
    pub w_gamma: Mat,
    pub b_gamma: Mat,
    pub w_beta: Mat,
    pub b_beta: Mat,
    pub w_gate: Mat,
    pub b_gate: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

/// Trainable weights of the modulation stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub w_p: Mat,
    pub attention: AttentionParams,
    pub film: FilmParams,
    pub ffn: FfnParams,
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Mat::randn(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
}

impl PipelineParams {
    /// Training initialization: fan-in scaled projections, FiLM maps near
    /// zero, gate nearly closed and a zero FFN output layer, so that the
    /// modulated prompt starts close to the plain context.
    pub fn init<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> Self {
        let (d, d_v, d_ff) = (dims.d, dims.d_v, dims.d_ff);
        Self {
            w_p: glorot(d_v, d, rng),
            attention: AttentionParams {
                w_q: glorot(d, d, rng),
                w_k: glorot(d, d, rng),
                w_v: glorot(d, d, rng),
                w_o: glorot(d, d, rng),
                heads: dims.heads,
            },
            film: FilmParams {
                w_gamma: Mat::randn(d, d, 0.02, rng),
                b_gamma: Mat::zeros(1, d),
                w_beta: Mat::randn(d, d, 0.02, rng),
                b_beta: Mat::zeros(1, d),
                w_gate: Mat::randn(d, d, 0.02, rng),
                b_gate: Mat::filled(1, d, GATE_BIAS_INIT),
            },
            ffn: FfnParams {
                w1: glorot(d, d_ff, rng),
                b1: Mat::zeros(1, d_ff),
                w2: Mat::zeros(d_ff, d),
                b2: Mat::zeros(1, d),
            },
        }
    }

    /// Every weight and bias random; used where all paths must carry signal
    /// (gradient checks, theory probes).
    pub fn random<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> Self {
        let (d, d_v, d_ff) = (dims.d, dims.d_v, dims.d_ff);
        Self {
            w_p: glorot(d_v, d, rng),
            attention: AttentionParams {
                w_q: glorot(d, d, rng),
                w_k: glorot(d, d, rng),
                w_v: glorot(d, d, rng),
                w_o: glorot(d, d, rng),
                heads: dims.heads,
            },
            film: FilmParams {
                w_gamma: glorot(d, d, rng).scale(0.5),
                b_gamma: Mat::randn(1, d, 0.1, rng),
                w_beta: glorot(d, d, rng).scale(0.5),
                b_beta: Mat::randn(1, d, 0.1, rng),
                w_gate: glorot(d, d, rng),
                b_gate: Mat::randn(1, d, 0.5, rng),
            },
            ffn: FfnParams {
                w1: glorot(d, d_ff, rng),
                b1: Mat::randn(1, d_ff, 0.1, rng),
                w2: glorot(d_ff, d, rng),
                b2: Mat::randn(1, d, 0.1, rng),
            },
        }
    }
}

/// Named groups of trainable tensors, in a fixed order.
pub const TRAINABLE_GROUPS: [&str; 6] = [
    "context",
    "visual_projection",
    "attention",
    "film",
    "gate",
    "ffn",
];

/// Everything that receives gradient updates. Also used as the gradient
/// container, with identical shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trainable {
    pub context: ContextBank,
    pub params: PipelineParams,
}

impl Trainable {
    /// Seeded training initialization.
    pub fn init(dims: &ModelDims, mode: ContextMode, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let context = ContextBank::init(mode, dims, &mut rng);
        let params = PipelineParams::init(dims, &mut rng);
        Ok(Self { context, params })
    }

    /// Seeded fully random parameters (see [`PipelineParams::random`]).
    pub fn random(dims: &ModelDims, mode: ContextMode, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut context = ContextBank::init(mode, dims, &mut rng);
        for block in &mut context.tokens {
            *block = Mat::randn(dims.n_ctx, dims.d, 1.0, &mut rng);
        }
        let params = PipelineParams::random(dims, &mut rng);
        Ok(Self { context, params })
    }

    /// `(group, name, tensor)` for every trainable tensor.
    pub fn tensors(&self) -> Vec<(&'static str, String, &Mat)> {
        let p = &self.params;
        let mut out: Vec<(&'static str, String, &Mat)> = self
            .context
            .tokens
            .iter()
            .enumerate()
            .map(|(i, m)| ("context", format!("context[{i}]"), m))
            .collect();
        out.push(("visual_projection", "w_p".into(), &p.w_p));
        out.push(("attention", "attention.w_q".into(), &p.attention.w_q));
        out.push(("attention", "attention.w_k".into(), &p.attention.w_k));
        out.push(("attention", "attention.w_v".into(), &p.attention.w_v));
        out.push(("attention", "attention.w_o".into(), &p.attention.w_o));
        out.push(("film", "film.w_gamma".into(), &p.film.w_gamma));
        out.push(("film", "film.b_gamma".into(), &p.film.b_gamma));
        out.push(("film", "film.w_beta".into(), &p.film.w_beta));
        out.push(("film", "film.b_beta".into(), &p.film.b_beta));
        out.push(("gate", "gate.w_gate".into(), &p.film.w_gate));
        out.push(("gate", "gate.b_gate".into(), &p.film.b_gate));
        out.push(("ffn", "ffn.w1".into(), &p.ffn.w1));
        out.push(("ffn", "ffn.b1".into(), &p.ffn.b1));
        out.push(("ffn", "ffn.w2".into(), &p.ffn.w2));
        out.push(("ffn", "ffn.b2".into(), &p.ffn.b2));
        out
    }

    /// Mutable view in the same order as [`Trainable::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let p = &mut self.params;
        let mut out: Vec<&mut Mat> = self.context.tokens.iter_mut().collect();
        out.extend([
            &mut p.w_p,
            &mut p.attention.w_q,
            &mut p.attention.w_k,
            &mut p.attention.w_v,
            &mut p.attention.w_o,
            &mut p.film.w_gamma,
            &mut p.film.b_gamma,
            &mut p.film.w_beta,
            &mut p.film.b_beta,
            &mut p.film.w_gate,
            &mut p.film.b_gate,
            &mut p.ffn.w1,
            &mut p.ffn.b1,
            &mut p.ffn.w2,
            &mut p.ffn.b2,
        ]);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.as_mut_slice().fill(0.0);
        }
        z
    }

    /// `self += scale * other`; shapes must agree tensor by tensor.
    pub fn axpy(&mut self, scale: f64, other: &Trainable) -> Result<()> {
        let theirs = other.tensors();
        let mine = self.tensors_mut();
        if mine.len() != theirs.len() {
            return Err(Error::dim("Trainable::axpy", "tensor inventories differ"));
        }
        for (m, (_, _, o)) in mine.into_iter().zip(theirs) {
            m.axpy(scale, o)?;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, m)| m.len()).sum()
    }

    /// Parameter count per group, in [`TRAINABLE_GROUPS`] order.
    pub fn group_counts(&self) -> Vec<(&'static str, usize)> {
        TRAINABLE_GROUPS
            .iter()
            .map(|g| {
                let n = self
                    .tensors()
                    .iter()
                    .filter(|(group, _, _)| group == g)
                    .map(|(_, _, m)| m.len())
                    .sum();
                (*g, n)
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, m)| m.is_finite())
    }
}
