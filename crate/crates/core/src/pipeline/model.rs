//! Full forward pass and its hand-composed reverse pass.

use super::encoders::FrozenEncoders;
use super::ops::{
    self, cross_modal_attend_backward, cross_modal_attend_cached, ffn_refine_backward,
    ffn_refine_cached, film_from_normalized, gate_backward, AttentionCache, FfnCache,
};
use super::params::{ContextMode, PipelineParams, Trainable, Variant};
use crate::error::{Error, Result};
use crate::tensor::{
    dot, l2_normalize_rows_with_norms, layer_norm_rows_backward, matmul, matmul_nt, matmul_tn,
    sigmoid, softmax, Mat,
};

/// Intermediates of one context block's modulation.
#[derive(Clone, Debug)]
pub struct BranchCache {
    attention: Option<AttentionCache>,
    /// `(LN(C), 1/std)`, shared by the query path and FiLM.
    ln_c: Option<(Mat, Vec<f64>)>,
    a: Option<Mat>,
    gamma: Option<Mat>,
    gate: Option<Mat>,
    c_tilde: Option<Mat>,
    ffn: Option<FfnCache>,
}

/// Intermediates of one forward pass, consumed by [`Trainable::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    variant: Variant,
    visual: Mat,
    branches: Vec<BranchCache>,
    /// Unnormalized text projections and their norms, per class.
    text_raw_norms: Vec<f64>,
}

/// Result of the modulation stack for one context block.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutput {
    /// Cross-modal feature `A` (absent for the text-only variant).
    pub a: Option<Mat>,
    /// Token-wise gate `G` (full variant only).
    pub gate: Option<Mat>,
    /// Modulated context `Ĉ`.
    pub c_hat: Mat,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub branches: Vec<BranchOutput>,
    /// `K x d_s` unit-norm class text features.
    pub text_feats: Mat,
    /// Unit-norm frozen image feature.
    pub image_feat: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    cache: Option<ForwardCache>,
}

impl PipelineOutput {
    /// The shared-context branch (or the first branch in class-specific mode).
    pub fn primary(&self) -> &BranchOutput {
        &self.branches[0]
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Drops the backward cache, keeping only the outputs.
    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    /// Predicted class, ties resolved towards the lowest index.
    pub fn predicted_class(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Modulation of a context block given its cross-modal feature `A`:
/// FiLM, gate, gated residual and FFN for the full variant; `C + A` then the
/// FFN for the no-FiLM ablation; the context itself for the text-only
/// variant.
pub fn modulate(c: &Mat, a: &Mat, params: &PipelineParams, variant: Variant) -> Result<Mat> {
    match variant {
        Variant::NoVision => Ok(c.clone()),
        Variant::VisionNoFilm => ops::ffn_refine(&c.add(a)?, &params.ffn),
        Variant::Full => {
            let c_tilde = ops::film_modulate(c, a, &params.film)?;
            let g = ops::compute_gate(a, &params.film)?;
            let c_prime = ops::gated_residual_update(c, &c_tilde, &g)?;
            ops::ffn_refine(&c_prime, &params.ffn)
        }
    }
}

fn modulate_cached(
    c: &Mat,
    z: Option<&Mat>,
    params: &PipelineParams,
    variant: Variant,
) -> Result<(BranchOutput, BranchCache)> {
    let empty = BranchCache {
        attention: None,
        ln_c: None,
        a: None,
        gamma: None,
        gate: None,
        c_tilde: None,
        ffn: None,
    };
    let z = match (variant, z) {
        (Variant::NoVision, _) => {
            return Ok((
                BranchOutput {
                    a: None,
                    gate: None,
                    c_hat: c.clone(),
                },
                empty,
            ))
        }
        (_, Some(z)) => z,
        (_, None) => return Err(Error::EmptyEvidence),
    };
    let (a, attn) = cross_modal_attend_cached(c, z, &params.attention)?;
    match variant {
        Variant::VisionNoFilm => {
            let c_prime = c.add(&a)?;
            let (c_hat, ffn) = ffn_refine_cached(&c_prime, &params.ffn)?;
            Ok((
                BranchOutput {
                    a: Some(a.clone()),
                    gate: None,
                    c_hat,
                },
                BranchCache {
                    attention: Some(attn),
                    a: Some(a),
                    ffn: Some(ffn),
                    ..empty
                },
            ))
        }
        Variant::Full => {
            let ln_c = attn.ln_c.clone();
            let ln_c_istd = attn.ln_c_istd.clone();
            let (c_tilde, gamma, _beta) = film_from_normalized(&ln_c, &a, &params.film)?;
            let gate = sigmoid(
                &matmul(&a, &params.film.w_gate)?.add_row_broadcast(&params.film.b_gate)?,
            );
            let c_prime = ops::gated_residual_update(c, &c_tilde, &gate)?;
            let (c_hat, ffn) = ffn_refine_cached(&c_prime, &params.ffn)?;
            Ok((
                BranchOutput {
                    a: Some(a.clone()),
                    gate: Some(gate.clone()),
                    c_hat,
                },
                BranchCache {
                    attention: Some(attn),
                    ln_c: Some((ln_c, ln_c_istd)),
                    a: Some(a),
                    gamma: Some(gamma),
                    gate: Some(gate),
                    c_tilde: Some(c_tilde),
                    ffn: Some(ffn),
                },
            ))
        }
        Variant::NoVision => unreachable!(),
    }
}

impl Trainable {
    /// Forward pass for one sample's visual tokens `V` (`M x d_v`).
    pub fn forward(
        &self,
        visual: &Mat,
        enc: &FrozenEncoders,
        variant: Variant,
    ) -> Result<PipelineOutput> {
        let k_classes = enc.classes();
        if self.context.mode == ContextMode::ClassSpecific && self.context.tokens.len() != k_classes
        {
            return Err(Error::dim(
                "forward",
                format!(
                    "{} context blocks for {k_classes} classes",
                    self.context.tokens.len()
                ),
            ));
        }
        if visual.cols() != self.params.w_p.rows() {
            return Err(Error::dim(
                "forward",
                format!(
                    "visual tokens have width {}, projection expects {}",
                    visual.cols(),
                    self.params.w_p.rows()
                ),
            ));
        }
        let z = if variant.uses_vision() {
            Some(ops::project_visual_tokens(visual, &self.params.w_p)?)
        } else {
            None
        };

        let mut branches = Vec::with_capacity(self.context.tokens.len());
        let mut caches = Vec::with_capacity(self.context.tokens.len());
        for block in &self.context.tokens {
            let (out, cache) = modulate_cached(block, z.as_ref(), &self.params, variant)?;
            branches.push(out);
            caches.push(cache);
        }

        let sums: Vec<Mat> = branches.iter().map(|b| b.c_hat.sum_rows()).collect();
        let n_ctx = self.context.n_ctx;
        let mut pooled = Mat::zeros(k_classes, self.context.d);
        for k in 0..k_classes {
            let s = &sums[self.context.block_index(k)];
            let row = ops::pooled_prompt(s.as_slice(), enc.class_embed.row(k), n_ctx);
            pooled.row_mut(k).copy_from_slice(&row);
        }
        let raw = matmul(&pooled, &enc.text_proj)?;
        let (text_feats, text_raw_norms) = l2_normalize_rows_with_norms(&raw)?;
        let image_feat = ops::encode_image_standin(visual, enc)?;
        let logits = ops::class_logits(&image_feat, &text_feats, enc.tau)?;
        let probs = softmax(&logits);

        Ok(PipelineOutput {
            branches,
            text_feats,
            image_feat,
            logits,
            probs,
            cache: Some(ForwardCache {
                variant,
                visual: visual.clone(),
                branches: caches,
                text_raw_norms,
            }),
        })
    }

    /// Reverse pass: gradients of a scalar loss with respect to every
    /// trainable tensor, given `dL/dprobs`. Frozen encoders get nothing.
    pub fn backward(
        &self,
        enc: &FrozenEncoders,
        out: &PipelineOutput,
        upstream: &[f64],
    ) -> Result<Trainable> {
        let cache = out.cache.as_ref().ok_or(Error::MissingCache)?;
        let k_classes = out.probs.len();
        if upstream.len() != k_classes {
            return Err(Error::dim(
                "backward",
                format!("{} upstream entries for {k_classes} classes", upstream.len()),
            ));
        }
        let mut grads = self.zeros_like();

        // softmax over logits
        let inner = dot(&out.probs, upstream);
        let d_logits: Vec<f64> = out
            .probs
            .iter()
            .zip(upstream)
            .map(|(p, u)| p * (u - inner))
            .collect();

        // logit_k = h·g_k/τ, g_k = y_k/‖y_k‖, y_k = pooled_k·E_T,
        // pooled_k = (Σ rows Ĉ + e_k)/(n+1)
        let d = self.context.d;
        let n_ctx = self.context.n_ctx;
        let mut d_sums = vec![vec![0.0; d]; self.context.tokens.len()];
        for k in 0..k_classes {
            let g = out.text_feats.row(k);
            let dg: Vec<f64> = out.image_feat.iter().map(|h| h * d_logits[k] / enc.tau).collect();
            let proj = dot(g, &dg);
            let dy: Vec<f64> = dg
                .iter()
                .zip(g)
                .map(|(a, b)| (a - b * proj) / cache.text_raw_norms[k])
                .collect();
            let d_pooled = matmul_nt(&Mat::row_vector(&dy), &enc.text_proj)?;
            let target = &mut d_sums[self.context.block_index(k)];
            for (t, v) in target.iter_mut().zip(d_pooled.as_slice()) {
                *t += v / (n_ctx + 1) as f64;
            }
        }

        for (b, d_sum) in d_sums.iter().enumerate() {
            let mut d_c_hat = Mat::zeros(n_ctx, d);
            for r in 0..n_ctx {
                d_c_hat.row_mut(r).copy_from_slice(d_sum);
            }
            let d_context = self.branch_backward(
                &self.context.tokens[b],
                &cache.branches[b],
                cache.variant,
                &cache.visual,
                &d_c_hat,
                &mut grads,
            )?;
            grads.context.tokens[b] = d_context;
        }
        Ok(grads)
    }

    fn branch_backward(
        &self,
        c: &Mat,
        cache: &BranchCache,
        variant: Variant,
        visual: &Mat,
        d_c_hat: &Mat,
        grads: &mut Trainable,
    ) -> Result<Mat> {
        if variant == Variant::NoVision {
            return Ok(d_c_hat.clone());
        }
        let p = &self.params;
        let missing = || Error::MissingCache;
        let ffn_cache = cache.ffn.as_ref().ok_or_else(missing)?;
        let fg = ffn_refine_backward(ffn_cache, &p.ffn, d_c_hat)?;
        accumulate(&mut grads.params.ffn.w1, &fg.w1)?;
        accumulate(&mut grads.params.ffn.b1, &fg.b1)?;
        accumulate(&mut grads.params.ffn.w2, &fg.w2)?;
        accumulate(&mut grads.params.ffn.b2, &fg.b2)?;
        let d_c_prime = fg.d_c_prime;

        let attn = cache.attention.as_ref().ok_or_else(missing)?;
        let a = cache.a.as_ref().ok_or_else(missing)?;
        let (d_c_direct, d_a, d_ln_c_film) = match variant {
            Variant::VisionNoFilm => (d_c_prime.clone(), d_c_prime, None),
            Variant::Full => {
                let gate = cache.gate.as_ref().ok_or_else(missing)?;
                let c_tilde = cache.c_tilde.as_ref().ok_or_else(missing)?;
                let gamma = cache.gamma.as_ref().ok_or_else(missing)?;
                let (ln_c, _) = cache.ln_c.as_ref().ok_or_else(missing)?;
                // C' = C + G ⊙ (C̃ − C)
                let mut d_c = d_c_prime.clone();
                let mut d_gate = d_c_prime.clone();
                let mut d_c_tilde = d_c_prime.clone();
                for i in 0..d_c.len() {
                    let g = gate.as_slice()[i];
                    let diff = c_tilde.as_slice()[i] - c.as_slice()[i];
                    let up = d_c_prime.as_slice()[i];
                    d_c.as_mut_slice()[i] = up * (1.0 - g);
                    d_gate.as_mut_slice()[i] = up * diff;
                    d_c_tilde.as_mut_slice()[i] = up * g;
                }
                let mut d_a = Mat::zeros(a.rows(), a.cols());
                // gate = σ(A·W_g + b_g)
                let d_gate_pre = gate_backward(gate, &d_gate)?;
                accumulate(&mut grads.params.film.w_gate, &matmul_tn(a, &d_gate_pre)?)?;
                accumulate(&mut grads.params.film.b_gate, &d_gate_pre.sum_rows())?;
                d_a.axpy(1.0, &matmul_nt(&d_gate_pre, &p.film.w_gate)?)?;
                // C̃ = LN(C) ⊙ (1 + γ) + β
                let mut d_ln_c = d_c_tilde.clone();
                let mut d_gamma = d_c_tilde.clone();
                for i in 0..d_ln_c.len() {
                    let up = d_c_tilde.as_slice()[i];
                    d_ln_c.as_mut_slice()[i] = up * (1.0 + gamma.as_slice()[i]);
                    d_gamma.as_mut_slice()[i] = up * ln_c.as_slice()[i];
                }
                let d_beta = d_c_tilde;
                accumulate(&mut grads.params.film.w_gamma, &matmul_tn(a, &d_gamma)?)?;
                accumulate(&mut grads.params.film.b_gamma, &d_gamma.sum_rows())?;
                accumulate(&mut grads.params.film.w_beta, &matmul_tn(a, &d_beta)?)?;
                accumulate(&mut grads.params.film.b_beta, &d_beta.sum_rows())?;
                d_a.axpy(1.0, &matmul_nt(&d_gamma, &p.film.w_gamma)?)?;
                d_a.axpy(1.0, &matmul_nt(&d_beta, &p.film.w_beta)?)?;
                (d_c, d_a, Some(d_ln_c))
            }
            Variant::NoVision => unreachable!(),
        };

        let ag = cross_modal_attend_backward(attn, &p.attention, &d_a)?;
        accumulate(&mut grads.params.attention.w_q, &ag.w_q)?;
        accumulate(&mut grads.params.attention.w_k, &ag.w_k)?;
        accumulate(&mut grads.params.attention.w_v, &ag.w_v)?;
        accumulate(&mut grads.params.attention.w_o, &ag.w_o)?;
        accumulate(&mut grads.params.w_p, &matmul_tn(visual, &ag.d_z)?)?;

        let mut d_ln_c = ag.d_ln_c;
        if let Some(extra) = d_ln_c_film {
            d_ln_c.axpy(1.0, &extra)?;
        }
        let mut d_c = layer_norm_rows_backward(&attn.ln_c, &attn.ln_c_istd, &d_ln_c)?;
        d_c.axpy(1.0, &d_c_direct)?;
        Ok(d_c)
    }
}

fn accumulate(dst: &mut Mat, src: &Mat) -> Result<()> {
    dst.axpy(1.0, src)
}

/// Text features for every class from the unmodulated base context.
pub fn base_text_features(model: &Trainable, enc: &FrozenEncoders) -> Result<Mat> {
    let k_classes = enc.classes();
    let mut feats = Mat::zeros(k_classes, enc.text_proj.cols());
    for k in 0..k_classes {
        let g = ops::encode_text_standin(model.context.block_for_class(k), k, enc)?;
        feats.row_mut(k).copy_from_slice(&g);
    }
    Ok(feats)
}
