//! Individual stages of the prompt pipeline. Each `*_cached` function also
//! returns what its backward counterpart needs.

use super::encoders::{check_tau, FrozenEncoders};
use super::params::{AttentionParams, FfnParams, FilmParams};
use crate::error::{Error, Result};
use crate::tensor::{
    dot, gelu, gelu_backward, l2_normalize_rows, layer_norm_rows_backward,
    layer_norm_rows_with_stats, matmul, matmul_nt, matmul_tn, sigmoid, sigmoid_backward, softmax,
    softmax_rows, softmax_rows_backward, Mat, LN_EPS,
};

/// `Z = V · W_p`.
pub fn project_visual_tokens(v: &Mat, w_p: &Mat) -> Result<Mat> {
    matmul(v, w_p)
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub ln_c: Mat,
    pub ln_c_istd: Vec<f64>,
    pub ln_z: Mat,
    pub ln_z_istd: Vec<f64>,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Attention weights per head, each `n_ctx x M`.
    pub weights: Vec<Mat>,
    /// Concatenated head outputs before `W_O`.
    pub heads_out: Mat,
}

/// `A = MHA(LN(C), LN(Z), LN(Z))`.
pub fn cross_modal_attend(c: &Mat, z: &Mat, p: &AttentionParams) -> Result<Mat> {
    cross_modal_attend_cached(c, z, p).map(|(a, _)| a)
}

pub fn cross_modal_attend_cached(
    c: &Mat,
    z: &Mat,
    p: &AttentionParams,
) -> Result<(Mat, AttentionCache)> {
    if z.rows() == 0 {
        return Err(Error::EmptyEvidence);
    }
    let d = p.w_q.rows();
    if p.heads == 0 || d % p.heads != 0 {
        return Err(Error::Config(format!(
            "heads ({}) must divide d ({d})",
            p.heads
        )));
    }
    if c.cols() != d || z.cols() != d {
        return Err(Error::dim(
            "cross_modal_attend",
            format!("context width {}, token width {}, d {d}", c.cols(), z.cols()),
        ));
    }
    let (ln_c, ln_c_istd) = layer_norm_rows_with_stats(c, LN_EPS);
    let (ln_z, ln_z_istd) = layer_norm_rows_with_stats(z, LN_EPS);
    let q = matmul(&ln_c, &p.w_q)?;
    let k = matmul(&ln_z, &p.w_k)?;
    let v = matmul(&ln_z, &p.w_v)?;
    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads_out = Mat::zeros(c.rows(), d);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = q.col_block(h * dh, dh);
        let kh = k.col_block(h * dh, dh);
        let vh = v.col_block(h * dh, dh);
        let scores = matmul_nt(&qh, &kh)?.scale(scale);
        let w = softmax_rows(&scores);
        heads_out.set_col_block(h * dh, &matmul(&w, &vh)?);
        weights.push(w);
    }
    let a = matmul(&heads_out, &p.w_o)?;
    Ok((
        a,
        AttentionCache {
            ln_c,
            ln_c_istd,
            ln_z,
            ln_z_istd,
            q,
            k,
            v,
            weights,
            heads_out,
        },
    ))
}

/// Pre-softmax attention scores per head, each `n_ctx x M`.
pub fn attention_scores(c: &Mat, z: &Mat, p: &AttentionParams) -> Result<Vec<Mat>> {
    let (ln_c, _) = layer_norm_rows_with_stats(c, LN_EPS);
    let (ln_z, _) = layer_norm_rows_with_stats(z, LN_EPS);
    let q = matmul(&ln_c, &p.w_q)?;
    let k = matmul(&ln_z, &p.w_k)?;
    let dh = p.w_q.rows() / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    (0..p.heads)
        .map(|h| {
            let s = matmul_nt(&q.col_block(h * dh, dh), &k.col_block(h * dh, dh))?;
            Ok(s.scale(scale))
        })
        .collect()
}

/// Gradients produced by [`cross_modal_attend_backward`].
pub struct AttentionGrads {
    /// Gradient with respect to `LN(C)` (the query input, before LN backward).
    pub d_ln_c: Mat,
    /// Gradient with respect to `Z` (through LN).
    pub d_z: Mat,
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
}

pub fn cross_modal_attend_backward(
    cache: &AttentionCache,
    p: &AttentionParams,
    d_a: &Mat,
) -> Result<AttentionGrads> {
    let d = p.w_q.rows();
    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let w_o = matmul_tn(&cache.heads_out, d_a)?;
    let d_heads = matmul_nt(d_a, &p.w_o)?;
    let mut d_q = Mat::zeros(cache.q.rows(), d);
    let mut d_k = Mat::zeros(cache.k.rows(), d);
    let mut d_v = Mat::zeros(cache.v.rows(), d);
    for h in 0..p.heads {
        let qh = cache.q.col_block(h * dh, dh);
        let kh = cache.k.col_block(h * dh, dh);
        let vh = cache.v.col_block(h * dh, dh);
        let w = &cache.weights[h];
        let d_oh = d_heads.col_block(h * dh, dh);
        let d_w = matmul_nt(&d_oh, &vh)?;
        d_v.set_col_block(h * dh, &matmul_tn(w, &d_oh)?);
        let d_s = softmax_rows_backward(w, &d_w)?.scale(scale);
        d_q.set_col_block(h * dh, &matmul(&d_s, &kh)?);
        d_k.set_col_block(h * dh, &matmul_tn(&d_s, &qh)?);
    }
    let w_q = matmul_tn(&cache.ln_c, &d_q)?;
    let w_k = matmul_tn(&cache.ln_z, &d_k)?;
    let w_v = matmul_tn(&cache.ln_z, &d_v)?;
    let d_ln_c = matmul_nt(&d_q, &p.w_q)?;
    let mut d_ln_z = matmul_nt(&d_k, &p.w_k)?;
    d_ln_z.axpy(1.0, &matmul_nt(&d_v, &p.w_v)?)?;
    let d_z = layer_norm_rows_backward(&cache.ln_z, &cache.ln_z_istd, &d_ln_z)?;
    Ok(AttentionGrads {
        d_ln_c,
        d_z,
        w_q,
        w_k,
        w_v,
        w_o,
    })
}

fn affine(x: &Mat, w: &Mat, b: &Mat) -> Result<Mat> {
    matmul(x, w)?.add_row_broadcast(b)
}

/// `C̃ = LN(C) ⊙ (1 + φ_γ(A)) + φ_β(A)` with linear `φ`.
pub fn film_modulate(c: &Mat, a: &Mat, p: &FilmParams) -> Result<Mat> {
    c.check_same_shape(a, "film_modulate")?;
    let (ln_c, _) = layer_norm_rows_with_stats(c, LN_EPS);
    film_from_normalized(&ln_c, a, p).map(|(c_tilde, _, _)| c_tilde)
}

/// FiLM on an already normalized context; returns `(C̃, γ, β)`.
pub(crate) fn film_from_normalized(ln_c: &Mat, a: &Mat, p: &FilmParams) -> Result<(Mat, Mat, Mat)> {
    let gamma = affine(a, &p.w_gamma, &p.b_gamma)?;
    let beta = affine(a, &p.w_beta, &p.b_beta)?;
    let mut c_tilde = ln_c.clone();
    for ((o, g), b) in c_tilde
        .as_mut_slice()
        .iter_mut()
        .zip(gamma.as_slice())
        .zip(beta.as_slice())
    {
        *o = *o * (1.0 + g) + b;
    }
    Ok((c_tilde, gamma, beta))
}

/// `G = σ(A · W_g + b_g)`.
pub fn compute_gate(a: &Mat, p: &FilmParams) -> Result<Mat> {
    Ok(sigmoid(&affine(a, &p.w_gate, &p.b_gate)?))
}

/// `C' = C + G ⊙ (C̃ − C)`.
pub fn gated_residual_update(c: &Mat, c_tilde: &Mat, g: &Mat) -> Result<Mat> {
    c.check_same_shape(c_tilde, "gated_residual_update")?;
    c.check_same_shape(g, "gated_residual_update")?;
    let mut out = c.clone();
    for ((o, t), gv) in out
        .as_mut_slice()
        .iter_mut()
        .zip(c_tilde.as_slice())
        .zip(g.as_slice())
    {
        *o += gv * (t - *o);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FfnCache {
    pub ln: Mat,
    pub ln_istd: Vec<f64>,
    pub pre: Mat,
    pub act: Mat,
}

/// `Ĉ = C' + FFN(LN(C'))`, `FFN(x) = gelu(x·W_1 + b_1)·W_2 + b_2`.
pub fn ffn_refine(c_prime: &Mat, p: &FfnParams) -> Result<Mat> {
    ffn_refine_cached(c_prime, p).map(|(c, _)| c)
}

pub fn ffn_refine_cached(c_prime: &Mat, p: &FfnParams) -> Result<(Mat, FfnCache)> {
    let (ln, ln_istd) = layer_norm_rows_with_stats(c_prime, LN_EPS);
    let pre = affine(&ln, &p.w1, &p.b1)?;
    let act = gelu(&pre);
    let branch = affine(&act, &p.w2, &p.b2)?;
    let out = c_prime.add(&branch)?;
    Ok((
        out,
        FfnCache {
            ln,
            ln_istd,
            pre,
            act,
        },
    ))
}

/// Weight gradients of the FFN plus the gradient with respect to `C'`.
pub struct FfnGrads {
    pub d_c_prime: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

pub fn ffn_refine_backward(cache: &FfnCache, p: &FfnParams, d_out: &Mat) -> Result<FfnGrads> {
    let b2 = d_out.sum_rows();
    let w2 = matmul_tn(&cache.act, d_out)?;
    let d_act = matmul_nt(d_out, &p.w2)?;
    let d_pre = gelu_backward(&cache.pre, &d_act)?;
    let b1 = d_pre.sum_rows();
    let w1 = matmul_tn(&cache.ln, &d_pre)?;
    let d_ln = matmul_nt(&d_pre, &p.w1)?;
    let mut d_c_prime = layer_norm_rows_backward(&cache.ln, &cache.ln_istd, &d_ln)?;
    d_c_prime.axpy(1.0, d_out)?;
    Ok(FfnGrads {
        d_c_prime,
        w1,
        b1,
        w2,
        b2,
    })
}

/// Mean of `[Ĉ; e_k]`, before the text projection.
pub(crate) fn pooled_prompt(c_hat_sum: &[f64], class_token: &[f64], n_ctx: usize) -> Vec<f64> {
    let denom = (n_ctx + 1) as f64;
    c_hat_sum
        .iter()
        .zip(class_token)
        .map(|(s, e)| (s + e) / denom)
        .collect()
}

/// `g_k = normalize(mean_rows([Ĉ; e_k]) · E_T)`.
pub fn encode_text_standin(c_hat: &Mat, class_idx: usize, enc: &FrozenEncoders) -> Result<Vec<f64>> {
    if class_idx >= enc.classes() {
        return Err(Error::IndexOutOfRange {
            index: class_idx,
            len: enc.classes(),
        });
    }
    if c_hat.cols() != enc.class_embed.cols() {
        return Err(Error::dim("encode_text_standin", "context width"));
    }
    let sum = c_hat.sum_rows();
    let pooled = pooled_prompt(sum.as_slice(), enc.class_embed.row(class_idx), c_hat.rows());
    let y = matmul(&Mat::row_vector(&pooled), &enc.text_proj)?;
    Ok(l2_normalize_rows(&y)?.into_vec())
}

/// `h = normalize(mean_rows(V) · E_h)`.
pub fn encode_image_standin(v: &Mat, enc: &FrozenEncoders) -> Result<Vec<f64>> {
    if v.rows() == 0 {
        return Err(Error::EmptyEvidence);
    }
    let y = matmul(&v.mean_rows(), &enc.image_proj)?;
    Ok(l2_normalize_rows(&y)?.into_vec())
}

/// Cosine logits `h · g_k / τ` for unit-normalized inputs.
pub fn class_logits(h: &[f64], g_text: &Mat, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if g_text.cols() != h.len() {
        return Err(Error::dim("class_logits", "feature width"));
    }
    Ok(g_text.iter_rows().map(|g| dot(h, g) / tau).collect())
}

/// `softmax_k(h · g_k / τ)`.
pub fn class_probabilities(h: &[f64], g_text: &Mat, tau: f64) -> Result<Vec<f64>> {
    Ok(softmax(&class_logits(h, g_text, tau)?))
}

/// Gradient of the gate stage: `(d_pre)` from the gate output gradient.
pub(crate) fn gate_backward(gate: &Mat, d_gate: &Mat) -> Result<Mat> {
    sigmoid_backward(gate, d_gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::params::ModelDims;
    use crate::tensor::layer_norm_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_attention(d: usize, heads: usize) -> AttentionParams {
        AttentionParams {
            w_q: Mat::identity(d),
            w_k: Mat::identity(d),
            w_v: Mat::identity(d),
            w_o: Mat::identity(d),
            heads,
        }
    }

    fn zero_film(d: usize) -> FilmParams {
        FilmParams {
            w_gamma: Mat::zeros(d, d),
            b_gamma: Mat::zeros(1, d),
            w_beta: Mat::zeros(d, d),
            b_beta: Mat::zeros(1, d),
            w_gate: Mat::zeros(d, d),
            b_gate: Mat::zeros(1, d),
        }
    }

    fn naive_product(a: &Mat, b: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Mat::randn(4, 6, 1.0, &mut rng);
        assert_eq!(project_visual_tokens(&v, &Mat::identity(6)).unwrap(), v);
        let w = Mat::randn(6, 3, 1.0, &mut rng);
        let z = project_visual_tokens(&Mat::zeros(4, 6), &w).unwrap();
        assert!(z.as_slice().iter().all(|&x| x == 0.0));

        let v = Mat::randn(8, 48, 1.0, &mut rng);
        let w = Mat::randn(48, 32, 1.0, &mut rng);
        let z = project_visual_tokens(&v, &w).unwrap();
        assert!(z.sub(&naive_product(&v, &w)).unwrap().max_abs() < 1e-12);
        assert!(project_visual_tokens(&v, &Mat::zeros(5, 2)).is_err());
    }

    #[test]
    fn attention_two_token_hand_example() {
        let p = identity_attention(2, 1);
        let c = Mat::row_vector(&[1.0, -1.0]);
        let z = Mat::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let a = cross_modal_attend(&c, &z, &p).unwrap();
        // Scores ±2/√2 (up to LN's eps shrinkage), so α₁ − α₂ = tanh(√2·s²)
        // where s = 1/sqrt(1 + eps).
        let s2 = 1.0 / (1.0 + LN_EPS);
        let expected = (2f64.sqrt() * s2).tanh() * s2.sqrt();
        assert!((a[(0, 0)] - expected).abs() < 1e-12);
        assert!((a[(0, 1)] + expected).abs() < 1e-12);
        assert!((a[(0, 0)] - 0.8884).abs() < 1e-4);
    }

    #[test]
    fn attention_singleton_and_identical_tokens() {
        let dims = ModelDims {
            d: 8,
            heads: 2,
            ..ModelDims::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = crate::pipeline::params::PipelineParams::random(&dims, &mut rng).attention;
        let c = Mat::randn(3, 8, 1.0, &mut rng);
        let z1 = Mat::randn(1, 8, 1.0, &mut rng);
        let single = cross_modal_attend(&c, &z1, &p).unwrap();
        // Softmax over one token: output = LN(z)·W_V·W_O for every query.
        let ln_z = layer_norm_rows(&z1, LN_EPS);
        let expected = matmul(&matmul(&ln_z, &p.w_v).unwrap(), &p.w_o).unwrap();
        for r in 0..3 {
            for (x, y) in single.row(r).iter().zip(expected.row(0)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let mut repeated = Mat::zeros(4, 8);
        for r in 0..4 {
            repeated.row_mut(r).copy_from_slice(z1.row(0));
        }
        let many = cross_modal_attend(&c, &repeated, &p).unwrap();
        assert!(many.sub(&single).unwrap().max_abs() < 1e-12);
        assert!(matches!(
            cross_modal_attend(&c, &Mat::zeros(0, 8), &p),
            Err(Error::EmptyEvidence)
        ));
    }

    #[test]
    fn attention_weights_are_distributions() {
        let dims = ModelDims::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = crate::pipeline::params::PipelineParams::random(&dims, &mut rng).attention;
        let c = Mat::randn(16, 32, 1.0, &mut rng);
        let z = Mat::randn(8, 32, 1.0, &mut rng);
        let (_, cache) = cross_modal_attend_cached(&c, &z, &p).unwrap();
        assert_eq!(cache.weights.len(), 8);
        for w in &cache.weights {
            for row in w.iter_rows() {
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn film_examples() {
        let d = 2;
        let c = Mat::row_vector(&[1.0, -1.0]);
        let a = Mat::row_vector(&[0.3, 0.7]);
        let out = film_modulate(&c, &a, &zero_film(d)).unwrap();
        assert_eq!(out, layer_norm_rows(&c, LN_EPS));

        let mut p = zero_film(d);
        p.b_gamma = Mat::row_vector(&[0.5, 0.5]);
        p.b_beta = Mat::row_vector(&[0.1, 0.1]);
        // Use an exact [1, -1] normalized row by construction.
        let (out, _, _) = film_from_normalized(&Mat::row_vector(&[1.0, -1.0]), &a, &p).unwrap();
        assert!((out[(0, 0)] - 1.6).abs() < 1e-15);
        assert!((out[(0, 1)] + 1.4).abs() < 1e-15);
    }

    #[test]
    fn film_matches_direct_evaluation() {
        let dims = ModelDims::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = crate::pipeline::params::PipelineParams::random(&dims, &mut rng).film;
        let c = Mat::randn(16, 32, 1.0, &mut rng);
        let a = Mat::randn(16, 32, 1.0, &mut rng);
        let out = film_modulate(&c, &a, &p).unwrap();
        let ln = layer_norm_rows(&c, LN_EPS);
        for i in 0..16 {
            for j in 0..32 {
                let mut g = p.b_gamma[(0, j)];
                let mut b = p.b_beta[(0, j)];
                for k in 0..32 {
                    g += a[(i, k)] * p.w_gamma[(k, j)];
                    b += a[(i, k)] * p.w_beta[(k, j)];
                }
                let e = ln[(i, j)] * (1.0 + g) + b;
                assert!((out[(i, j)] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_examples() {
        let a = Mat::filled(2, 2, 3.0);
        let g = compute_gate(&a, &zero_film(2)).unwrap();
        assert!(g.as_slice().iter().all(|&x| x == 0.5));
        let mut p = zero_film(2);
        p.b_gate = Mat::filled(1, 2, 20.0);
        let g = compute_gate(&a, &p).unwrap();
        assert!(g.as_slice().iter().all(|&x| x > 1.0 - 1e-8 && x < 1.0));

        let dims = ModelDims::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = crate::pipeline::params::PipelineParams::random(&dims, &mut rng).film;
        let a = Mat::randn(16, 32, 2.0, &mut rng);
        let g = compute_gate(&a, &p).unwrap();
        for i in 0..16 {
            for j in 0..32 {
                let pre: f64 =
                    p.b_gate[(0, j)] + (0..32).map(|k| a[(i, k)] * p.w_gate[(k, j)]).sum::<f64>();
                let e = 1.0 / (1.0 + (-pre).exp());
                assert!(g[(i, j)] > 0.0 && g[(i, j)] < 1.0);
                assert!((g[(i, j)] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gated_residual_examples() {
        let c = Mat::row_vector(&[1.0, -1.0]);
        let t = Mat::row_vector(&[1.6, -1.4]);
        assert_eq!(gated_residual_update(&c, &t, &Mat::zeros(1, 2)).unwrap(), c);
        assert_eq!(gated_residual_update(&c, &t, &Mat::filled(1, 2, 1.0)).unwrap(), t);
        let mid = gated_residual_update(&c, &t, &Mat::filled(1, 2, 0.5)).unwrap();
        assert!((mid[(0, 0)] - 1.3).abs() < 1e-15 && (mid[(0, 1)] + 1.2).abs() < 1e-15);
    }

    #[test]
    fn ffn_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let dims = ModelDims::default();
        let mut p = crate::pipeline::params::PipelineParams::random(&dims, &mut rng).ffn;
        let c = Mat::randn(16, 32, 1.0, &mut rng);

        let out = ffn_refine(&c, &p).unwrap();
        let ln = layer_norm_rows(&c, LN_EPS);
        let hidden = gelu(&naive_product(&ln, &p.w1).add_row_broadcast(&p.b1).unwrap());
        let expected = c
            .add(&naive_product(&hidden, &p.w2).add_row_broadcast(&p.b2).unwrap())
            .unwrap();
        assert!(out.sub(&expected).unwrap().max_abs() < 1e-12);

        let mut zeroed = p.clone();
        zeroed.w2 = Mat::zeros(64, 32);
        zeroed.b2 = Mat::zeros(1, 32);
        assert_eq!(ffn_refine(&c, &zeroed).unwrap(), c);

        p.b1 = Mat::zeros(1, 64);
        p.b2 = Mat::zeros(1, 32);
        let z = ffn_refine(&Mat::zeros(16, 32), &p).unwrap();
        assert!(z.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn text_encoder_examples() {
        let dims = ModelDims {
            d: 4,
            d_s: 4,
            d_v: 4,
            heads: 1,
            classes: 2,
            ..ModelDims::default()
        };
        let mut enc = FrozenEncoders::random(&dims, 0.07, 1).unwrap();
        enc.text_proj = Mat::identity(4);
        enc.class_embed = Mat::from_rows(&[vec![3.0, 4.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]])
            .unwrap();
        let mut broadcast = Mat::zeros(5, 4);
        for r in 0..5 {
            broadcast.row_mut(r).copy_from_slice(enc.class_embed.row(0));
        }
        let g = encode_text_standin(&broadcast, 0, &enc).unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        assert!(matches!(
            encode_text_standin(&broadcast, 2, &enc),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        ));

        let dims = ModelDims::default();
        let enc = FrozenEncoders::random(&dims, 0.07, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c_hat = Mat::randn(16, 32, 1.0, &mut rng);
        for k in 0..dims.classes {
            let g = encode_text_standin(&c_hat, k, &enc).unwrap();
            assert!((dot(&g, &g).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn image_encoder_examples() {
        let dims = ModelDims::default();
        let enc = FrozenEncoders::random(&dims, 0.07, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tok = Mat::randn(1, 48, 1.0, &mut rng);
        let mut same = Mat::zeros(8, 48);
        for r in 0..8 {
            same.row_mut(r).copy_from_slice(tok.row(0));
        }
        let h = encode_image_standin(&same, &enc).unwrap();
        let direct = l2_normalize_rows(&matmul(&tok, &enc.image_proj).unwrap()).unwrap();
        for (a, b) in h.iter().zip(direct.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let v = Mat::randn(8, 48, 1.0, &mut rng);
        let h1 = encode_image_standin(&v, &enc).unwrap();
        assert!((dot(&h1, &h1).sqrt() - 1.0).abs() < 1e-12);
        let h2 = encode_image_standin(&v.scale(2.0), &enc).unwrap();
        for (a, b) in h1.iter().zip(&h2) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            encode_image_standin(&Mat::zeros(8, 48), &enc),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn probability_examples() {
        let g = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let h = [1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()];
        assert_eq!(class_probabilities(&h, &g, 0.07).unwrap(), vec![0.5, 0.5]);
        let p = class_probabilities(&[1.0, 0.0], &g, 1e12).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-10);
        let p = class_probabilities(&[1.0, 0.0], &g, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        assert!(matches!(
            class_probabilities(&[1.0, 0.0], &g, 0.0),
            Err(Error::Config(_))
        ));
    }
}
