//! Tiled attention numerics: online softmax, blockwise iteration, partial
//! reduction, and latent-attention matrix absorption.
//!
//! The iterative path walks KV blocks keeping a running maximum and softmax
//! denominator so the output is renormalized every step; the reduction path
//! merges two finished partial states by rescaling with factors derived from
//! their maxima and denominators. Both agree with a single-pass softmax to
//! rounding error, for any block partition and any merge order.

use crate::tensor::{Mat2D, Real, ScratchMeter, TensorError, Vec1D};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AttnError {
    #[error("empty block")]
    EmptyBlock,
    #[error("empty latent cache")]
    EmptyCache,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Running state of blockwise attention: unnormalized-then-rescaled output,
/// running max logit, and running softmax denominator.
///
/// The empty state is `(O = 0, m = -inf, l = 0)` and acts as the identity of
/// [`combine_partials`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttnPartial<T: Real> {
    pub output: Vec1D<T>,
    pub max_logit: T,
    pub denom: T,
}

impl<T: Real> AttnPartial<T> {
    pub fn empty(dim: usize) -> Self {
        Self { output: Vec1D::zeros(dim), max_logit: T::neg_infinity(), denom: T::zero() }
    }

    pub fn is_empty(&self) -> bool {
        self.denom == T::zero()
    }

    /// State validity: `l >= 0`, `l = 0` only with `m = -inf`, output finite
    /// whenever `l > 0`.
    pub fn is_valid(&self) -> bool {
        if self.denom < T::zero() {
            return false;
        }
        if self.denom == T::zero() {
            return self.max_logit == T::neg_infinity();
        }
        self.output.as_slice().iter().all(|v| v.is_finite())
    }
}

/// Result of one online-softmax update over a logit block.
#[derive(Debug, Clone)]
pub struct SoftmaxStep<T: Real> {
    /// New running max logit.
    pub max_logit: T,
    /// Normalized scores of this block (`e / l`).
    pub probs: Vec1D<T>,
    /// Rescale factor applied to the prior output (`l_prev·e^{m_prev-m} / l`).
    pub prior_scale: T,
    /// New running denominator.
    pub denom: T,
}

/// One online-softmax update: folds a block of raw logits `x` into the prior
/// running state.
///
/// All exponents are max-subtracted, so overflow cannot occur; an empty prior
/// (`m = -inf, l = 0`) contributes nothing because `l_prev` multiplies the
/// carry term.
pub fn online_softmax_step<T: Real>(
    x: &Vec1D<T>,
    prev_max: T,
    prev_denom: T,
) -> Result<SoftmaxStep<T>, AttnError> {
    if x.is_empty() {
        return Err(AttnError::EmptyBlock);
    }
    let block_max = x.as_slice().iter().cloned().fold(T::neg_infinity(), T::max);
    let max_logit = prev_max.max(block_max);
    // exp(-inf - m) is forced to 0 so the empty state stays inert.
    let carry = if prev_denom == T::zero() { T::zero() } else { prev_denom * (prev_max - max_logit).exp() };
    let mut exps = Vec::with_capacity(x.len());
    let mut sum = T::zero();
    for &v in x.as_slice() {
        let e = (v - max_logit).exp();
        sum = sum + e;
        exps.push(e);
    }
    let denom = carry + sum;
    for e in exps.iter_mut() {
        *e = *e / denom;
    }
    Ok(SoftmaxStep {
        max_logit,
        probs: Vec1D::new(exps).expect("probs finite"),
        prior_scale: carry / denom,
        denom,
    })
}

/// Blockwise attention for one query row: `x_i = Q·K_iᵀ`, online softmax,
/// then `O ← α·O + p_i·V_i` per block. Returns the running state, whose
/// output equals `softmax(Q·Kᵀ)·V` over the concatenation of all blocks.
///
/// An empty block list returns the empty state.
pub fn tiled_attention_iterative<T: Real>(
    query: &Vec1D<T>,
    blocks: &[(Mat2D<T>, Mat2D<T>)],
) -> Result<AttnPartial<T>, AttnError> {
    let dim = query.len();
    let mut state = AttnPartial::empty(blocks.first().map_or(dim, |(_, v)| v.cols()));
    for (keys, values) in blocks {
        if keys.cols() != dim {
            return Err(TensorError::DimMismatch(format!(
                "key block has {} cols, query has {}",
                keys.cols(),
                dim
            ))
            .into());
        }
        if keys.rows() != values.rows() {
            return Err(TensorError::DimMismatch(format!(
                "key block rows {} != value block rows {}",
                keys.rows(),
                values.rows()
            ))
            .into());
        }
        if keys.rows() == 0 {
            return Err(AttnError::EmptyBlock);
        }
        if values.cols() != state.output.len() {
            return Err(TensorError::DimMismatch(format!(
                "value block cols {} != output dim {}",
                values.cols(),
                state.output.len()
            ))
            .into());
        }
        let logits = keys.mul_vec_t(query)?;
        let step = online_softmax_step(&logits, state.max_logit, state.denom)?;
        let block_out = values.left_mul_vec(&step.probs)?;
        for (o, b) in state.output.as_mut_slice().iter_mut().zip(block_out.as_slice()) {
            *o = *o * step.prior_scale + *b;
        }
        state.max_logit = step.max_logit;
        state.denom = step.denom;
    }
    Ok(state)
}

/// Merge two finished partial states. Commutative and associative to
/// rounding; the empty state is the exact identity.
pub fn combine_partials<T: Real>(
    a: &AttnPartial<T>,
    b: &AttnPartial<T>,
) -> Result<AttnPartial<T>, AttnError> {
    if a.output.len() != b.output.len() {
        return Err(TensorError::DimMismatch(format!(
            "partial outputs of lengths {} and {}",
            a.output.len(),
            b.output.len()
        ))
        .into());
    }
    if a.is_empty() {
        return Ok(b.clone());
    }
    if b.is_empty() {
        return Ok(a.clone());
    }
    let max_logit = a.max_logit.max(b.max_logit);
    let ea = a.denom * (a.max_logit - max_logit).exp();
    let eb = b.denom * (b.max_logit - max_logit).exp();
    let denom = ea + eb;
    let wa = ea / denom;
    let wb = eb / denom;
    let mut out = Vec::with_capacity(a.output.len());
    for (x, y) in a.output.as_slice().iter().zip(b.output.as_slice()) {
        out.push(wa * *x + wb * *y);
    }
    Ok(AttnPartial { output: Vec1D::new(out)?, max_logit, denom })
}

/// Reference attention: one global max-subtracted softmax over all logits.
/// Kept independent of the blockwise path so the two can check each other.
pub fn naive_attention<T: Real>(
    query: &Vec1D<T>,
    keys: &Mat2D<T>,
    values: &Mat2D<T>,
) -> Result<Vec1D<T>, AttnError> {
    if keys.rows() == 0 {
        return Err(AttnError::EmptyBlock);
    }
    if keys.rows() != values.rows() {
        return Err(TensorError::DimMismatch(format!(
            "{} keys vs {} values",
            keys.rows(),
            values.rows()
        ))
        .into());
    }
    let logits = keys.mul_vec_t(query)?;
    let max = logits.as_slice().iter().cloned().fold(T::neg_infinity(), T::max);
    let mut weights = Vec::with_capacity(logits.len());
    let mut denom = T::zero();
    for &v in logits.as_slice() {
        let e = (v - max).exp();
        denom = denom + e;
        weights.push(e);
    }
    for w in weights.iter_mut() {
        *w = *w / denom;
    }
    values.left_mul_vec(&Vec1D::new(weights)?).map_err(Into::into)
}

// ---------------------------------------------------------------------------
// Latent attention (matrix absorption)
// ---------------------------------------------------------------------------

/// Up-projection / output weights of a latent attention block.
///
/// `w_uq: d_cq × (heads·d_head)`, `w_uk`/`w_uv`: `d_latent × (heads·d_head)`,
/// `w_o`: `(heads·d_head) × d_model`. The rotary query is `heads·d_rope` long
/// and each cached token carries a shared `d_rope` rotary key.
#[derive(Debug, Clone)]
pub struct MlaWeights<T: Real> {
    pub w_uq: Mat2D<T>,
    pub w_uk: Mat2D<T>,
    pub w_uv: Mat2D<T>,
    pub w_o: Mat2D<T>,
    pub heads: usize,
    pub d_head: usize,
    pub d_rope: usize,
}

impl<T: Real> MlaWeights<T> {
    pub fn d_latent(&self) -> usize {
        self.w_uk.rows()
    }

    fn validate(&self, c_q: &Vec1D<T>, q_rope: &Vec1D<T>) -> Result<(), AttnError> {
        let hd = self.heads * self.d_head;
        if self.w_uq.cols() != hd || self.w_uk.cols() != hd || self.w_uv.cols() != hd {
            return Err(TensorError::DimMismatch(
                "up-projection cols must equal heads*d_head".into(),
            )
            .into());
        }
        if self.w_uk.rows() != self.w_uv.rows() {
            return Err(TensorError::DimMismatch("w_uk and w_uv latent dims differ".into()).into());
        }
        if self.w_o.rows() != hd {
            return Err(TensorError::DimMismatch("w_o rows must equal heads*d_head".into()).into());
        }
        if c_q.len() != self.w_uq.rows() {
            return Err(TensorError::DimMismatch("query latent length vs w_uq rows".into()).into());
        }
        if q_rope.len() != self.heads * self.d_rope {
            return Err(TensorError::DimMismatch(
                "rotary query length must equal heads*d_rope".into(),
            )
            .into());
        }
        Ok(())
    }
}

fn check_cache<T: Real>(
    cache: &[(Vec1D<T>, Vec1D<T>)],
    d_latent: usize,
    d_rope: usize,
) -> Result<(), AttnError> {
    if cache.is_empty() {
        return Err(AttnError::EmptyCache);
    }
    for (c_kv, k_rope) in cache {
        if c_kv.len() != d_latent || k_rope.len() != d_rope {
            return Err(TensorError::DimMismatch("latent cache entry shape".into()).into());
        }
    }
    Ok(())
}

/// Per-head dot of `v` (length `d_head`) with row `r` of `w` restricted to
/// head `h`'s column block.
fn head_row_dot<T: Real>(w: &Mat2D<T>, r: usize, h: usize, d_head: usize, v: &[T]) -> T {
    let row = w.row(r);
    let mut acc = T::zero();
    for (k, &x) in v.iter().enumerate() {
        acc = acc + x * row[h * d_head + k];
    }
    acc
}

/// Absorbed-path logits: `q_h^A = (c_Q·W^{UQ}_h)·(W^{UK}_h)ᵀ` against the
/// stored latent vectors, plus the rotary term. Returns `heads × tokens`.
pub fn mla_absorbed_logits<T: Real>(
    c_q: &Vec1D<T>,
    q_rope: &Vec1D<T>,
    cache: &[(Vec1D<T>, Vec1D<T>)],
    w: &MlaWeights<T>,
) -> Result<Mat2D<T>, AttnError> {
    w.validate(c_q, q_rope)?;
    check_cache(cache, w.d_latent(), w.d_rope)?;
    let q_c = w.w_uq.left_mul_vec(c_q)?;
    let d_latent = w.d_latent();
    let mut logits = Mat2D::zeros(w.heads, cache.len());
    for h in 0..w.heads {
        let q_head = &q_c.as_slice()[h * w.d_head..(h + 1) * w.d_head];
        // q^A_h[j] = q^C_h · (W^{UK}_h row j)
        let mut q_abs = Vec::with_capacity(d_latent);
        for j in 0..d_latent {
            q_abs.push(head_row_dot(&w.w_uk, j, h, w.d_head, q_head));
        }
        let q_r = &q_rope.as_slice()[h * w.d_rope..(h + 1) * w.d_rope];
        for (t, (c_kv, k_rope)) in cache.iter().enumerate() {
            let mut logit = T::zero();
            for (a, b) in q_abs.iter().zip(c_kv.as_slice()) {
                logit = logit + *a * *b;
            }
            for (a, b) in q_r.iter().zip(k_rope.as_slice()) {
                logit = logit + *a * *b;
            }
            logits.set(h, t, logit);
        }
    }
    Ok(logits)
}

/// Naive-path logits: reconstruct `q^C` and per-token `k^C` and take their
/// dot products directly, plus the rotary term.
pub fn mla_naive_logits<T: Real>(
    c_q: &Vec1D<T>,
    q_rope: &Vec1D<T>,
    cache: &[(Vec1D<T>, Vec1D<T>)],
    w: &MlaWeights<T>,
) -> Result<Mat2D<T>, AttnError> {
    w.validate(c_q, q_rope)?;
    check_cache(cache, w.d_latent(), w.d_rope)?;
    let q_c = w.w_uq.left_mul_vec(c_q)?;
    let mut logits = Mat2D::zeros(w.heads, cache.len());
    for (t, (c_kv, k_rope)) in cache.iter().enumerate() {
        let k_c = w.w_uk.left_mul_vec(c_kv)?;
        for h in 0..w.heads {
            let mut logit = T::zero();
            for k in 0..w.d_head {
                logit = logit + q_c[h * w.d_head + k] * k_c[h * w.d_head + k];
            }
            for r in 0..w.d_rope {
                logit = logit + q_rope[h * w.d_rope + r] * k_rope[r];
            }
            logits.set(h, t, logit);
        }
    }
    Ok(logits)
}

/// Latent cache tokens processed per tiled-attention block in the absorbed
/// path.
const MLA_BLOCK_TOKENS: usize = 32;

/// Absorbed latent attention. Never materializes per-head full K/V: each
/// head runs tiled attention directly over `[c_KV ‖ k_R]` rows, and the
/// score-weighted latent accumulator is up-projected afterwards
/// (`u = ((s·c_KV)·W^{UV})·W^{O}`).
pub fn mla_absorbed_attention<T: Real>(
    c_q: &Vec1D<T>,
    q_rope: &Vec1D<T>,
    cache: &[(Vec1D<T>, Vec1D<T>)],
    w: &MlaWeights<T>,
) -> Result<Vec1D<T>, AttnError> {
    mla_absorbed_attention_with_footprint(c_q, q_rope, cache, w).map(|(u, _)| u)
}

/// Same as [`mla_absorbed_attention`], also reporting the peak number of
/// scratch elements the path materialized.
pub fn mla_absorbed_attention_with_footprint<T: Real>(
    c_q: &Vec1D<T>,
    q_rope: &Vec1D<T>,
    cache: &[(Vec1D<T>, Vec1D<T>)],
    w: &MlaWeights<T>,
) -> Result<(Vec1D<T>, usize), AttnError> {
    w.validate(c_q, q_rope)?;
    let d_latent = w.d_latent();
    check_cache(cache, d_latent, w.d_rope)?;
    let mut meter = ScratchMeter::new();
    let d_ext = d_latent + w.d_rope;
    let heads_dim = w.heads * w.d_head;

    let q_c = w.w_uq.left_mul_vec(c_q)?;
    meter.alloc(q_c.len());
    let mut projected = Vec1D::zeros(heads_dim);
    meter.alloc(heads_dim);

    for h in 0..w.heads {
        let q_head = &q_c.as_slice()[h * w.d_head..(h + 1) * w.d_head];
        // Extended query [q^A_h ‖ q^R_h]: dotting it with [c_KV ‖ k_R] gives
        // the absorbed logit including the rotary term.
        let mut q_ext = Vec::with_capacity(d_ext);
        for j in 0..d_latent {
            q_ext.push(head_row_dot(&w.w_uk, j, h, w.d_head, q_head));
        }
        q_ext.extend_from_slice(&q_rope.as_slice()[h * w.d_rope..(h + 1) * w.d_rope]);
        let q_ext = Vec1D::new(q_ext)?;
        meter.alloc(d_ext);

        let mut state = AttnPartial::empty(d_latent);
        meter.alloc(d_latent);
        for chunk in cache.chunks(MLA_BLOCK_TOKENS) {
            let rows = chunk.len();
            let mut key_block = Mat2D::zeros(rows, d_ext);
            let mut val_block = Mat2D::zeros(rows, d_latent);
            meter.alloc(rows * (d_ext + d_latent));
            for (r, (c_kv, k_rope)) in chunk.iter().enumerate() {
                key_block.row_mut(r)[..d_latent].copy_from_slice(c_kv.as_slice());
                key_block.row_mut(r)[d_latent..].copy_from_slice(k_rope.as_slice());
                val_block.row_mut(r).copy_from_slice(c_kv.as_slice());
            }
            let logits = key_block.mul_vec_t(&q_ext)?;
            let step = online_softmax_step(&logits, state.max_logit, state.denom)?;
            let block_out = val_block.left_mul_vec(&step.probs)?;
            for (o, b) in state.output.as_mut_slice().iter_mut().zip(block_out.as_slice()) {
                *o = *o * step.prior_scale + *b;
            }
            state.max_logit = step.max_logit;
            state.denom = step.denom;
            meter.release(rows * (d_ext + d_latent));
        }
        // o_h = (s·c_KV)·W^{UV}_h
        for k in 0..w.d_head {
            let mut acc = T::zero();
            for j in 0..d_latent {
                acc = acc + state.output[j] * w.w_uv.get(j, h * w.d_head + k);
            }
            projected[h * w.d_head + k] = acc;
        }
        meter.release(d_latent);
        meter.release(d_ext);
    }
    let u = w.w_o.left_mul_vec(&projected)?;
    meter.release(heads_dim);
    meter.release(q_c.len());
    Ok((u, meter.peak_elems()))
}

/// Naive latent attention: reconstructs every head's full-resolution
/// key/value vectors for the whole cache, runs plain attention per head, and
/// projects with `W^{O}`.
pub fn mla_naive_oracle<T: Real>(
    c_q: &Vec1D<T>,
    q_rope: &Vec1D<T>,
    cache: &[(Vec1D<T>, Vec1D<T>)],
    w: &MlaWeights<T>,
) -> Result<Vec1D<T>, AttnError> {
    mla_naive_oracle_with_footprint(c_q, q_rope, cache, w).map(|(u, _)| u)
}

/// Same as [`mla_naive_oracle`], also reporting the peak number of scratch
/// elements the path materialized (dominated by the reconstructed K/V).
pub fn mla_naive_oracle_with_footprint<T: Real>(
    c_q: &Vec1D<T>,
    q_rope: &Vec1D<T>,
    cache: &[(Vec1D<T>, Vec1D<T>)],
    w: &MlaWeights<T>,
) -> Result<(Vec1D<T>, usize), AttnError> {
    w.validate(c_q, q_rope)?;
    let d_latent = w.d_latent();
    check_cache(cache, d_latent, w.d_rope)?;
    let mut meter = ScratchMeter::new();
    let tokens = cache.len();
    let d_full = w.d_head + w.d_rope;
    let heads_dim = w.heads * w.d_head;

    let q_c = w.w_uq.left_mul_vec(c_q)?;
    meter.alloc(q_c.len());

    // Reconstructed full K/V for all heads and all cached tokens.
    let mut k_full = Mat2D::zeros(tokens, w.heads * d_full);
    let mut v_full = Mat2D::zeros(tokens, heads_dim);
    meter.alloc(tokens * w.heads * d_full + tokens * heads_dim);
    for (t, (c_kv, k_rope)) in cache.iter().enumerate() {
        let k_c = w.w_uk.left_mul_vec(c_kv)?;
        let v_c = w.w_uv.left_mul_vec(c_kv)?;
        for h in 0..w.heads {
            let dst = k_full.row_mut(t);
            dst[h * d_full..h * d_full + w.d_head]
                .copy_from_slice(&k_c.as_slice()[h * w.d_head..(h + 1) * w.d_head]);
            dst[h * d_full + w.d_head..(h + 1) * d_full].copy_from_slice(k_rope.as_slice());
        }
        v_full.row_mut(t).copy_from_slice(v_c.as_slice());
    }

    let mut concat = Vec1D::zeros(heads_dim);
    meter.alloc(heads_dim);
    for h in 0..w.heads {
        let mut q_ext = Vec::with_capacity(d_full);
        q_ext.extend_from_slice(&q_c.as_slice()[h * w.d_head..(h + 1) * w.d_head]);
        q_ext.extend_from_slice(&q_rope.as_slice()[h * w.d_rope..(h + 1) * w.d_rope]);
        let q_ext = Vec1D::new(q_ext)?;
        meter.alloc(d_full);

        let mut keys = Mat2D::zeros(tokens, d_full);
        let mut values = Mat2D::zeros(tokens, w.d_head);
        meter.alloc(tokens * (d_full + w.d_head));
        for t in 0..tokens {
            keys.row_mut(t).copy_from_slice(&k_full.row(t)[h * d_full..(h + 1) * d_full]);
            values
                .row_mut(t)
                .copy_from_slice(&v_full.row(t)[h * w.d_head..(h + 1) * w.d_head]);
        }
        let head_out = naive_attention(&q_ext, &keys, &values)?;
        concat.as_mut_slice()[h * w.d_head..(h + 1) * w.d_head]
            .copy_from_slice(head_out.as_slice());
        meter.release(tokens * (d_full + w.d_head));
        meter.release(d_full);
    }
    let u = w.w_o.left_mul_vec(&concat)?;
    meter.release(heads_dim);
    meter.release(tokens * w.heads * d_full + tokens * heads_dim);
    meter.release(q_c.len());
    Ok((u, meter.peak_elems()))
}
