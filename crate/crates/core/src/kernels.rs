//! Raw numeric kernels behind the differentiable ops.
//!
//! Conventions shared by every kernel here:
//! - activations are row-major and channels-last (`[T, H, W, C]` for video,
//!   `[rows, C]` for token matrices), so inner loops run over contiguous
//!   channel vectors and autovectorize;
//! - convolution weights are `[kt, kh, kw, c_in, c_out]` with `c_out`
//!   innermost, so the hot loop is an axpy over `c_out`;
//! - parallelism only splits disjoint output regions (see [`crate::parallel`]);
//!   accumulating passes (most backward kernels, reductions) keep one fixed
//!   order so results never depend on scheduling;
//! - whole-tensor reductions accumulate in `f64` over fixed 1024-element
//!   chunks, which keeps sums deterministic and accurate for tensors of a few
//!   million elements.

use crate::parallel::for_each_chunk_mut;

/// Reduction chunk length for deterministic two-level summation.
const SUM_CHUNK: usize = 1024;

/// Deterministic whole-slice sum with f64 accumulation.
pub fn sum_all_f64(x: &[f32]) -> f64 {
    let mut total = 0.0f64;
    for chunk in x.chunks(SUM_CHUNK) {
        let mut part = 0.0f64;
        for &v in chunk {
            part += v as f64;
        }
        total += part;
    }
    total
}

/// `y[i] += a * x[i]`.
#[inline]
pub fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with f32 accumulation (used on short contiguous rows).
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0f32;
    for (av, bv) in a.iter().zip(b) {
        s += av * bv;
    }
    s
}

// ---------------------------------------------------------------------------
// Matrix multiplication
// ---------------------------------------------------------------------------

/// `out[m,n] = a[m,k] * b[k,n]`. `out` is overwritten.
pub fn matmul_nn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_chunk_mut(out, n, |i, row| {
        row.fill(0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            axpy(row, av, &b[kk * n..(kk + 1) * n]);
        }
    });
}

/// `out[m,n] = a[m,k] * b[n,k]^T` (rows of `a` dotted with rows of `b`).
pub fn matmul_nt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for_each_chunk_mut(out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(arow, &b[j * k..(j + 1) * k]);
        }
    });
}

/// `out[k,n] = a[m,k]^T * b[m,n]` (columns of `a` against rows of `b`).
pub fn matmul_tn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for_each_chunk_mut(out, n, |kk, row| {
        row.fill(0.0);
        for i in 0..m {
            axpy(row, a[i * k + kk], &b[i * n..(i + 1) * n]);
        }
    });
}

/// Batched `matmul_nn` over leading batch dimension.
pub fn bmm_nn(a: &[f32], b: &[f32], out: &mut [f32], bt: usize, m: usize, k: usize, n: usize) {
    for i in 0..bt {
        matmul_nn(
            &a[i * m * k..(i + 1) * m * k],
            &b[i * k * n..(i + 1) * k * n],
            &mut out[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
        );
    }
}

/// Batched `matmul_nt` over leading batch dimension.
pub fn bmm_nt(a: &[f32], b: &[f32], out: &mut [f32], bt: usize, m: usize, k: usize, n: usize) {
    for i in 0..bt {
        matmul_nt(
            &a[i * m * k..(i + 1) * m * k],
            &b[i * n * k..(i + 1) * n * k],
            &mut out[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
        );
    }
}

/// Batched `matmul_tn` over leading batch dimension.
pub fn bmm_tn(a: &[f32], b: &[f32], out: &mut [f32], bt: usize, m: usize, k: usize, n: usize) {
    for i in 0..bt {
        matmul_tn(
            &a[i * m * k..(i + 1) * m * k],
            &b[i * m * n..(i + 1) * m * n],
            &mut out[i * k * n..(i + 1) * k * n],
            m,
            k,
            n,
        );
    }
}

// ---------------------------------------------------------------------------
// Fused scaled-dot-product attention
// ---------------------------------------------------------------------------

/// Canonical processing order for the keys of one query row: indices sorted
/// by descending score, ties broken by the key row's bit pattern and then the
/// value row's. Rows that are bitwise equal may land in either order, which
/// cannot affect any partial sum. The resulting summation order depends only
/// on the *set* of (key, value) rows, never on how they were arranged, which
/// is what makes attention outputs bit-identical under key permutation.
fn canonical_key_order(
    scores: &[f32],
    k: &[f32],
    v: &[f32],
    dh: usize,
    dv: usize,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let row_cmp = |a: &[f32], b: &[f32]| -> std::cmp::Ordering {
        for (x, y) in a.iter().zip(b) {
            let c = x.total_cmp(y);
            if c != std::cmp::Ordering::Equal {
                return c;
            }
        }
        std::cmp::Ordering::Equal
    };
    order.sort_unstable_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| row_cmp(&k[a * dh..(a + 1) * dh], &k[b * dh..(b + 1) * dh]))
            .then_with(|| row_cmp(&v[a * dv..(a + 1) * dv], &v[b * dv..(b + 1) * dv]))
    });
    order
}

/// Scores, exponentials, and denominator for one query row in canonical key
/// order. The denominator is an f64 sum of f32 values along that order, so it
/// is a function of the key/value multiset only.
fn attention_row_terms(
    qrow: &[f32],
    k: &[f32],
    v: &[f32],
    scale: f32,
    m: usize,
    dh: usize,
    dv: usize,
) -> (Vec<f32>, Vec<usize>, f64) {
    let mut scores = vec![0.0f32; m];
    for (j, s) in scores.iter_mut().enumerate() {
        *s = dot(qrow, &k[j * dh..(j + 1) * dh]) * scale;
    }
    let order = canonical_key_order(&scores, k, v, dh, dv);
    let mx = scores[order[0]];
    let mut denom = 0.0f64;
    let mut e = vec![0.0f32; m];
    for &j in &order {
        let ej = (scores[j] - mx).exp();
        e[j] = ej;
        denom += ej as f64;
    }
    (e, order, denom)
}

/// Fused attention forward: `out[n,dv] = softmax(q kᵀ · scale) v` with
/// `q [n,dh]`, `k [m,dh]`, `v [m,dv]`. Per-key summation follows the
/// canonical order from [`canonical_key_order`], with f64 accumulation of
/// f32 terms, so the output is bit-identical under any permutation of the
/// key/value rows and across thread counts.
pub fn attention_rows(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    scale: f32,
    out: &mut [f32],
    n: usize,
    m: usize,
    dh: usize,
    dv: usize,
) {
    debug_assert_eq!(q.len(), n * dh);
    debug_assert_eq!(k.len(), m * dh);
    debug_assert_eq!(v.len(), m * dv);
    debug_assert_eq!(out.len(), n * dv);
    debug_assert!(m > 0);
    for_each_chunk_mut(out, dv.max(1), |i, orow| {
        let (e, order, denom) = attention_row_terms(&q[i * dh..(i + 1) * dh], k, v, scale, m, dh, dv);
        let d = denom as f32;
        let mut acc = vec![0.0f64; dv];
        for &j in &order {
            let pj = e[j] / d;
            for (a, &vv) in acc.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                *a += (pj * vv) as f64;
            }
        }
        for (o, a) in orow.iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    });
}

/// The row-stochastic attention weights `[n, m]` matching
/// [`attention_rows`] (same canonical-order denominators). Used by the
/// backward pass and by diagnostics.
pub fn attention_probs(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    scale: f32,
    probs: &mut [f32],
    n: usize,
    m: usize,
    dh: usize,
    dv: usize,
) {
    debug_assert_eq!(probs.len(), n * m);
    for_each_chunk_mut(probs, m, |i, prow| {
        let (e, _, denom) = attention_row_terms(&q[i * dh..(i + 1) * dh], k, v, scale, m, dh, dv);
        let d = denom as f32;
        for (p, ej) in prow.iter_mut().zip(&e) {
            *p = ej / d;
        }
    });
}

// ---------------------------------------------------------------------------
// Rowwise softmax and layer norm
// ---------------------------------------------------------------------------

/// Rowwise softmax with max subtraction. `out` may alias nothing.
pub fn softmax_rows(x: &[f32], out: &mut [f32], n: usize) {
    debug_assert_eq!(x.len(), out.len());
    debug_assert!(n > 0 && x.len() % n == 0);
    for_each_chunk_mut(out, n, |i, row| {
        let xin = &x[i * n..(i + 1) * n];
        let mx = xin.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0f32;
        for (o, &v) in row.iter_mut().zip(xin) {
            let e = (v - mx).exp();
            *o = e;
            denom += e;
        }
        let inv = 1.0 / denom;
        for o in row.iter_mut() {
            *o *= inv;
        }
    });
}

/// Backward of rowwise softmax given its output `y`: `dx = y .* (dy - sum(dy .* y))`.
pub fn softmax_rows_backward(y: &[f32], dy: &[f32], dx: &mut [f32], n: usize) {
    for_each_chunk_mut(dx, n, |i, row| {
        let yr = &y[i * n..(i + 1) * n];
        let dyr = &dy[i * n..(i + 1) * n];
        let inner = dot(yr, dyr);
        for ((o, &yv), &dyv) in row.iter_mut().zip(yr).zip(dyr) {
            *o = yv * (dyv - inner);
        }
    });
}

/// Rowwise layer norm over the last dimension `d`.
///
/// `y = (x - mean) * rstd * gamma + beta`; per-row `mean` and `rstd` are
/// written to `stats` (`[rows, 2]`) for the backward pass.
pub fn layer_norm_rows(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
    out: &mut [f32],
    stats: &mut [f32],
    d: usize,
) {
    debug_assert_eq!(x.len(), out.len());
    let rows = x.len() / d;
    debug_assert_eq!(stats.len(), rows * 2);
    // Stats first (disjoint chunks of 2), then the normalized output.
    for_each_chunk_mut(stats, 2, |i, st| {
        let xr = &x[i * d..(i + 1) * d];
        let mean = (sum_all_f64(xr) / d as f64) as f32;
        let mut var = 0.0f64;
        for &v in xr {
            let c = (v - mean) as f64;
            var += c * c;
        }
        let rstd = 1.0 / ((var / d as f64) as f32 + eps).sqrt();
        st[0] = mean;
        st[1] = rstd;
    });
    for_each_chunk_mut(out, d, |i, row| {
        let xr = &x[i * d..(i + 1) * d];
        let mean = stats[i * 2];
        let rstd = stats[i * 2 + 1];
        for (j, o) in row.iter_mut().enumerate() {
            *o = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
    });
}

/// Backward of rowwise layer norm.
///
/// Accumulates into `dgamma`/`dbeta` (sequential, fixed row order) and writes
/// `dx`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows_backward(
    x: &[f32],
    gamma: &[f32],
    stats: &[f32],
    dy: &[f32],
    dx: &mut [f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
    d: usize,
) {
    let rows = x.len() / d;
    for i in 0..rows {
        let xr = &x[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let mean = stats[i * 2];
        let rstd = stats[i * 2 + 1];
        // xhat = (x - mean) * rstd; dx = rstd * (g - mean(g) - xhat * mean(g * xhat))
        // with g = dy * gamma.
        let mut g_sum = 0.0f64;
        let mut gx_sum = 0.0f64;
        for j in 0..d {
            let xhat = (xr[j] - mean) * rstd;
            let g = dyr[j] * gamma[j];
            g_sum += g as f64;
            gx_sum += (g * xhat) as f64;
            dgamma[j] += dyr[j] * xhat;
            dbeta[j] += dyr[j];
        }
        let g_mean = (g_sum / d as f64) as f32;
        let gx_mean = (gx_sum / d as f64) as f32;
        let dxr = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            let xhat = (xr[j] - mean) * rstd;
            let g = dyr[j] * gamma[j];
            dxr[j] = rstd * (g - g_mean - xhat * gx_mean);
        }
    }
}

// ---------------------------------------------------------------------------
// Temporally causal 3D convolution
// ---------------------------------------------------------------------------

/// Static description of a causal 3D convolution.
///
/// Temporal padding is `kt - 1` frames of zeros on the past side only, so an
/// output at time `t` depends on inputs at times `<= t * st` and never on the
/// future. Spatial padding is symmetric `(k - 1) / 2` (odd kernels only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub st: usize,
    pub sh: usize,
    pub sw: usize,
}

impl Conv3dSpec {
    /// Output (T, H, W) for an input (T, H, W).
    pub fn out_dims(&self, t: usize, h: usize, w: usize) -> (usize, usize, usize) {
        let ph = (self.kh - 1) / 2;
        let pw = (self.kw - 1) / 2;
        let to = (t - 1) / self.st + 1;
        let ho = (h + 2 * ph - self.kh) / self.sh + 1;
        let wo = (w + 2 * pw - self.kw) / self.sw + 1;
        (to, ho, wo)
    }

    pub fn weight_len(&self) -> usize {
        self.kt * self.kh * self.kw * self.c_in * self.c_out
    }
}

/// Forward causal 3D convolution.
///
/// `x` is `[T, H, W, c_in]`, `w` is `[kt, kh, kw, c_in, c_out]`, `b` is
/// `[c_out]`, `out` is `[T', H', W', c_out]` and is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_causal(
    x: &[f32],
    w: &[f32],
    b: &[f32],
    out: &mut [f32],
    spec: Conv3dSpec,
    t: usize,
    h: usize,
    wd: usize,
) {
    let (to, ho, wo) = spec.out_dims(t, h, wd);
    debug_assert_eq!(x.len(), t * h * wd * spec.c_in);
    debug_assert_eq!(w.len(), spec.weight_len());
    debug_assert_eq!(out.len(), to * ho * wo * spec.c_out);
    let (ci, co) = (spec.c_in, spec.c_out);
    let pt = spec.kt - 1;
    let ph = (spec.kh - 1) / 2;
    let pw = (spec.kw - 1) / 2;
    // One chunk per output frame: frames are independent outputs.
    for_each_chunk_mut(out, ho * wo * co, |tidx, frame| {
        for yo in 0..ho {
            for xo in 0..wo {
                let orow = &mut frame[(yo * wo + xo) * co..(yo * wo + xo + 1) * co];
                orow.copy_from_slice(b);
                for dt in 0..spec.kt {
                    let ti = (tidx * spec.st + dt) as isize - pt as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    for dy in 0..spec.kh {
                        let yi = (yo * spec.sh + dy) as isize - ph as isize;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        for dx in 0..spec.kw {
                            let xi = (xo * spec.sw + dx) as isize - pw as isize;
                            if xi < 0 || xi >= wd as isize {
                                continue;
                            }
                            let xoff =
                                ((ti as usize * h + yi as usize) * wd + xi as usize) * ci;
                            let woff = ((dt * spec.kh + dy) * spec.kw + dx) * ci * co;
                            let xrow = &x[xoff..xoff + ci];
                            for (c, &xv) in xrow.iter().enumerate() {
                                axpy(orow, xv, &w[woff + c * co..woff + (c + 1) * co]);
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Backward causal 3D convolution.
///
/// Given upstream `dout`, accumulates `dx`, `dw`, `db` (all pre-zeroed by the
/// caller). A single fixed-order sweep over output positions keeps the three
/// accumulations deterministic.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_causal_backward(
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    dx: &mut [f32],
    dw: &mut [f32],
    db: &mut [f32],
    spec: Conv3dSpec,
    t: usize,
    h: usize,
    wd: usize,
) {
    let (to, ho, wo) = spec.out_dims(t, h, wd);
    let (ci, co) = (spec.c_in, spec.c_out);
    let pt = spec.kt - 1;
    let ph = (spec.kh - 1) / 2;
    let pw = (spec.kw - 1) / 2;
    for tidx in 0..to {
        for yo in 0..ho {
            for xo in 0..wo {
                let goff = ((tidx * ho + yo) * wo + xo) * co;
                let grow = &dout[goff..goff + co];
                axpy(db, 1.0, grow);
                for dt in 0..spec.kt {
                    let ti = (tidx * spec.st + dt) as isize - pt as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    for dy in 0..spec.kh {
                        let yi = (yo * spec.sh + dy) as isize - ph as isize;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        for dx_ in 0..spec.kw {
                            let xi = (xo * spec.sw + dx_) as isize - pw as isize;
                            if xi < 0 || xi >= wd as isize {
                                continue;
                            }
                            let xoff =
                                ((ti as usize * h + yi as usize) * wd + xi as usize) * ci;
                            let woff = ((dt * spec.kh + dy) * spec.kw + dx_) * ci * co;
                            for c in 0..ci {
                                let wrow = &w[woff + c * co..woff + (c + 1) * co];
                                dx[xoff + c] += dot(grow, wrow);
                                axpy(
                                    &mut dw[woff + c * co..woff + (c + 1) * co],
                                    x[xoff + c],
                                    grow,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Causal nearest-neighbor upsampling
// ---------------------------------------------------------------------------

/// Source frame index for causal temporal upsampling by factor `ft`:
/// output time 0 maps to latent 0, then each later latent frame expands to
/// `ft` output frames. Inverse of the stride-`ft` causal downsampling grid.
#[inline]
pub fn causal_upsample_src(t_out: usize, ft: usize) -> usize {
    t_out.div_ceil(ft)
}

/// Nearest-neighbor upsampling: temporal factor `ft` (causal alignment),
/// spatial factor `fs`. `x` is `[T, H, W, C]`, out is
/// `[(T-1)*ft + 1, H*fs, W*fs, C]`, overwritten.
pub fn causal_upsample(
    x: &[f32],
    out: &mut [f32],
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    ft: usize,
    fs: usize,
) {
    let (ho, wo) = (h * fs, w * fs);
    debug_assert_eq!(out.len(), ((t - 1) * ft + 1) * ho * wo * c);
    for_each_chunk_mut(out, ho * wo * c, |tidx, frame| {
        let ts = causal_upsample_src(tidx, ft);
        debug_assert!(ts < t);
        for yo in 0..ho {
            for xo in 0..wo {
                let src = ((ts * h + yo / fs) * w + xo / fs) * c;
                frame[(yo * wo + xo) * c..(yo * wo + xo + 1) * c]
                    .copy_from_slice(&x[src..src + c]);
            }
        }
    });
}

/// Backward of [`causal_upsample`]: accumulate replica gradients into `dx`.
pub fn causal_upsample_backward(
    dout: &[f32],
    dx: &mut [f32],
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    ft: usize,
    fs: usize,
) {
    let (ho, wo) = (h * fs, w * fs);
    let t_out = (t - 1) * ft + 1;
    for tidx in 0..t_out {
        let ts = causal_upsample_src(tidx, ft);
        for yo in 0..ho {
            for xo in 0..wo {
                let src = ((ts * h + yo / fs) * w + xo / fs) * c;
                let go = &dout[((tidx * ho + yo) * wo + xo) * c..][..c];
                axpy(&mut dx[src..src + c], 1.0, go);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Bilinear sampling from a 2D feature map
// ---------------------------------------------------------------------------

/// Corner indices and weights for 1-D linear interpolation with border clamp.
#[inline]
fn lerp_cell(p: f32, size: usize) -> (usize, usize, f32) {
    let p0 = p.floor();
    let frac = p - p0;
    let i0 = (p0 as isize).clamp(0, size as isize - 1) as usize;
    let i1 = (p0 as isize + 1).clamp(0, size as isize - 1) as usize;
    (i0, i1, frac)
}

/// Bilinear sampling of `map` (`[H, W, C]`) at `coords` (`[P, 2]`, each row
/// `(u, v)` in pixel units where `(i, j)` lands exactly on texel
/// `map[j, i, :]`; out-of-bounds positions clamp to the border). Writes `out`
/// (`[P, C]`).
pub fn bilinear_sample(
    map: &[f32],
    coords: &[f32],
    out: &mut [f32],
    h: usize,
    w: usize,
    c: usize,
) {
    debug_assert_eq!(map.len(), h * w * c);
    debug_assert_eq!(coords.len() * c, out.len() * 2);
    for_each_chunk_mut(out, c, |p, row| {
        let px = coords[p * 2];
        let py = coords[p * 2 + 1];
        let (x0, x1, fx) = lerp_cell(px, w);
        let (y0, y1, fy) = lerp_cell(py, h);
        let w00 = (1.0 - fy) * (1.0 - fx);
        let w01 = (1.0 - fy) * fx;
        let w10 = fy * (1.0 - fx);
        let w11 = fy * fx;
        row.fill(0.0);
        axpy(row, w00, &map[(y0 * w + x0) * c..][..c]);
        axpy(row, w01, &map[(y0 * w + x1) * c..][..c]);
        axpy(row, w10, &map[(y1 * w + x0) * c..][..c]);
        axpy(row, w11, &map[(y1 * w + x1) * c..][..c]);
    });
}

/// Backward of [`bilinear_sample`] with respect to the feature map only
/// (sample coordinates are treated as data). Accumulates into `dmap`.
pub fn bilinear_sample_backward(
    coords: &[f32],
    dout: &[f32],
    dmap: &mut [f32],
    h: usize,
    w: usize,
    c: usize,
) {
    let p_count = coords.len() / 2;
    for p in 0..p_count {
        let px = coords[p * 2];
        let py = coords[p * 2 + 1];
        let (x0, x1, fx) = lerp_cell(px, w);
        let (y0, y1, fy) = lerp_cell(py, h);
        let grow = &dout[p * c..(p + 1) * c];
        axpy(&mut dmap[(y0 * w + x0) * c..][..c], (1.0 - fy) * (1.0 - fx), grow);
        axpy(&mut dmap[(y0 * w + x1) * c..][..c], (1.0 - fy) * fx, grow);
        axpy(&mut dmap[(y1 * w + x0) * c..][..c], fy * (1.0 - fx), grow);
        axpy(&mut dmap[(y1 * w + x1) * c..][..c], fy * fx, grow);
    }
}

// ---------------------------------------------------------------------------
// Axis utilities (concat / slice / permute)
// ---------------------------------------------------------------------------

/// View a shape as `(outer, axis, inner)` products around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Copy `src` (`outer * len_src * inner`) into `dst` at axis offset `off`
/// where `dst` has axis length `len_dst`.
pub fn axis_scatter(
    src: &[f32],
    dst: &mut [f32],
    outer: usize,
    len_src: usize,
    len_dst: usize,
    inner: usize,
    off: usize,
) {
    for o in 0..outer {
        let s = &src[o * len_src * inner..(o + 1) * len_src * inner];
        let d = &mut dst[(o * len_dst + off) * inner..(o * len_dst + off + len_src) * inner];
        d.copy_from_slice(s);
    }
}

/// Accumulating variant of [`axis_scatter`] (`dst += src`), used by slice
/// backward.
pub fn axis_scatter_add(
    src: &[f32],
    dst: &mut [f32],
    outer: usize,
    len_src: usize,
    len_dst: usize,
    inner: usize,
    off: usize,
) {
    for o in 0..outer {
        let s = &src[o * len_src * inner..(o + 1) * len_src * inner];
        let d = &mut dst[(o * len_dst + off) * inner..(o * len_dst + off + len_src) * inner];
        axpy(d, 1.0, s);
    }
}

/// Extract an axis range: inverse of [`axis_scatter`].
pub fn axis_gather(
    src: &[f32],
    dst: &mut [f32],
    outer: usize,
    len_src: usize,
    len_dst: usize,
    inner: usize,
    off: usize,
) {
    for o in 0..outer {
        let s = &src[(o * len_src + off) * inner..(o * len_src + off + len_dst) * inner];
        let d = &mut dst[o * len_dst * inner..(o + 1) * len_dst * inner];
        d.copy_from_slice(s);
    }
}

/// Permute axes: `out[idx[perm[0]], idx[perm[1]], ...] = in[idx]`.
///
/// `shape` is the input shape; the output shape is `shape` permuted by `perm`.
pub fn permute(x: &[f32], out: &mut [f32], shape: &[usize], perm: &[usize]) {
    let rank = shape.len();
    debug_assert_eq!(perm.len(), rank);
    let in_strides = crate::tensor::strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides = crate::tensor::strides_of(&out_shape);
    // Walk the input in order; compute the scattered output offset
    // incrementally from the multi-index.
    let mut idx = vec![0usize; rank];
    // out stride for each *input* axis.
    let mut scatter = vec![0usize; rank];
    for (o_axis, &p) in perm.iter().enumerate() {
        scatter[p] = out_strides[o_axis];
    }
    let _ = in_strides;
    let mut out_off = 0usize;
    for (i, &v) in x.iter().enumerate() {
        out[out_off] = v;
        if i + 1 == x.len() {
            break;
        }
        // Increment the row-major multi-index and the scattered offset.
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            out_off += scatter[axis];
            if idx[axis] < shape[axis] {
                break;
            }
            out_off -= scatter[axis] * shape[axis];
            idx[axis] = 0;
        }
    }
}

/// Column sums of a `[rows, n]` matrix, accumulated in fixed row order.
pub fn col_sums(x: &[f32], out: &mut [f32], n: usize) {
    debug_assert_eq!(x.len() % n, 0);
    out.fill(0.0);
    for row in x.chunks_exact(n) {
        axpy(out, 1.0, row);
    }
}
