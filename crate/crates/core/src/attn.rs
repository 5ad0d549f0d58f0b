//! The attention zoo: multi-head self- and cross-attention, pose-token
//! grouping, interspatial positional encoding (ISPE), the symmetric
//! interspatial attention (ISA) pair, and the transformer / ISA transformer
//! blocks.
//!
//! Every variant funnels into the fused per-head attention op on the tape,
//! which sums keys in a canonical order — so key/value permutation
//! invariance holds bit-exactly, and a zero positional encoding reduces ISA
//! to plain cross-attention bit-for-bit.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{ndc_project, pixel_to_ndc, sinusoidal_pe, ProjectionMatrix, Vec3};
use crate::nn::{Affine, Bound, LayerNorm, Linear, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Hidden width expansion of transformer feed-forward layers.
pub const FFN_EXPANSION: usize = 4;

// -- projection parameters ---------------------------------------------------

/// Projection weights for one attention operation: queries from a `d_x`-wide
/// stream, keys/values from a `d_y`-wide stream, `heads` heads of width
/// `d / heads`, and an output projection back to `d`. Projections carry no
/// biases, so zero weights give an exactly zero output.
pub struct AttentionParams {
    pub d: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        d_x: usize,
        d_y: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(AttentionParams {
            d,
            d_x,
            d_y,
            heads,
            q: Linear::new(store, rng, &format!("{prefix}.q"), d_x, d),
            k: Linear::new(store, rng, &format!("{prefix}.k"), d_y, d),
            v: Linear::new(store, rng, &format!("{prefix}.v"), d_y, d),
            o: Linear::new(store, rng, &format!("{prefix}.o"), d, d),
        })
    }

    /// Self-attention parameters: queries and keys share one width.
    pub fn self_params(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        Self::new(store, rng, prefix, d, d, d, heads)
    }

    /// Parameter names in registration order (q, k, v, o), for tests that
    /// overwrite weights.
    pub fn weight_names(&self) -> [String; 4] {
        [
            self.q.weight_name().to_string(),
            self.k.weight_name().to_string(),
            self.v.weight_name().to_string(),
            self.o.weight_name().to_string(),
        ]
    }
}

/// Multi-head scaled-dot-product attention with queries from `q_in` and
/// keys/values from `kv_in`. An empty key set falls back to a zero context
/// (the caller's residual then leaves the stream unchanged).
fn attention_core(
    tape: &mut Tape,
    p: &Bound,
    params: &AttentionParams,
    q_in: Var,
    kv_in: Var,
) -> Result<Var> {
    let qs = tape.shape(q_in).to_vec();
    let ks = tape.shape(kv_in).to_vec();
    if qs.len() != 2 || qs[1] != params.d_x {
        return Err(Error::Shape(format!(
            "attention: query tokens {qs:?} must be [N, {}]",
            params.d_x
        )));
    }
    if ks.len() != 2 || ks[1] != params.d_y {
        return Err(Error::Shape(format!(
            "attention: key tokens {ks:?} must be [M, {}]",
            params.d_y
        )));
    }
    if ks[0] == 0 {
        return Ok(tape.constant(Tensor::zeros(&[qs[0], params.d])));
    }
    let q = params.q.forward(tape, p, q_in)?;
    let k = params.k.forward(tape, p, kv_in)?;
    let v = params.v.forward(tape, p, kv_in)?;
    let dh = params.d / params.heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut ctx = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = tape.slice(q, 1, h * dh, dh)?;
        let kh = tape.slice(k, 1, h * dh, dh)?;
        let vh = tape.slice(v, 1, h * dh, dh)?;
        ctx.push(tape.attention(qh, kh, vh, scale)?);
    }
    let cat = if ctx.len() == 1 {
        ctx[0]
    } else {
        tape.concat(&ctx, 1)?
    };
    params.o.forward(tape, p, cat)
}

/// Multi-head self-attention over one token set.
pub fn self_attention(tape: &mut Tape, p: &Bound, params: &AttentionParams, x: Var) -> Result<Var> {
    attention_core(tape, p, params, x, x)
}

/// Multi-head cross-attention: queries from `x`, keys/values from `y`.
pub fn cross_attention(
    tape: &mut Tape,
    p: &Bound,
    params: &AttentionParams,
    x: Var,
    y: Var,
) -> Result<Var> {
    attention_core(tape, p, params, x, y)
}

/// Interspatial attention: positional encodings are added element-wise to
/// both token sets before the projections, then plain cross-attention runs.
/// Zero encodings therefore reduce to [`cross_attention`] bit-exactly.
pub fn isa_attention(
    tape: &mut Tape,
    p: &Bound,
    params: &AttentionParams,
    x: Var,
    pe_x: Var,
    y: Var,
    pe_y: Var,
) -> Result<Var> {
    if tape.shape(x) != tape.shape(pe_x) {
        return Err(Error::Shape(format!(
            "isa: query PE {:?} must match tokens {:?}",
            tape.shape(pe_x),
            tape.shape(x)
        )));
    }
    if tape.shape(y) != tape.shape(pe_y) {
        return Err(Error::Shape(format!(
            "isa: key PE {:?} must match tokens {:?}",
            tape.shape(pe_y),
            tape.shape(y)
        )));
    }
    let xq = tape.add(x, pe_x)?;
    let ykv = tape.add(y, pe_y)?;
    attention_core(tape, p, params, xq, ykv)
}

// -- token sets --------------------------------------------------------------

/// Screen-side tokens of one latent frame: features on the tape plus their
/// latent-pixel coordinates and extents.
#[derive(Clone)]
pub struct TokenSet2D {
    /// `[N, d]` features.
    pub tokens: Var,
    /// Latent-pixel positions `(s_x, s_y)` per token.
    pub coords: Vec<(f64, f64)>,
    /// Latent width `w`.
    pub width: usize,
    /// Latent height `h`.
    pub height: usize,
    /// Latent frame index `j`.
    pub frame: usize,
}

impl TokenSet2D {
    pub fn validate(&self, tape: &Tape) -> Result<()> {
        let shape = tape.shape(self.tokens);
        if shape.len() != 2 || shape[0] != self.coords.len() {
            return Err(Error::Shape(format!(
                "2D token set: {} coordinates for token shape {shape:?}",
                self.coords.len()
            )));
        }
        for &(sx, sy) in &self.coords {
            if !(0.0..=self.width as f64).contains(&sx) || !(0.0..=self.height as f64).contains(&sy)
            {
                return Err(Error::InvalidArg(format!(
                    "2D token at ({sx}, {sy}) outside [0, {}] x [0, {}]",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

/// Pose-side tokens: features on the tape plus world-space positions and the
/// source video frame / person index of each token.
#[derive(Clone)]
pub struct TokenSet3D {
    /// `[M, d]` features.
    pub tokens: Var,
    /// World-space point `g` per token.
    pub coords: Vec<Vec3>,
    /// Source (input video) frame index per token, 1-based.
    pub frames: Vec<usize>,
    /// Person index per token.
    pub persons: Vec<usize>,
}

impl TokenSet3D {
    pub fn validate(&self, tape: &Tape) -> Result<()> {
        let shape = tape.shape(self.tokens);
        let m = self.coords.len();
        if shape.len() != 2 || shape[0] != m || self.frames.len() != m || self.persons.len() != m {
            return Err(Error::Shape(format!(
                "3D token set: token shape {shape:?} vs {m} coords, {} frames, {} persons",
                self.frames.len(),
                self.persons.len()
            )));
        }
        Ok(())
    }
}

/// Select the pose tokens that condition latent frame `j >= 1`: those whose
/// source frame lies in the closed range `1 + f_t (j-1) ..= 1 + f_t j`,
/// keeping all persons. Runs of selected tokens are sliced off the tape, so
/// gradients flow back to the full set (boundary frames shared by two
/// adjacent groups accumulate from both).
pub fn group_pose_frames(
    tape: &mut Tape,
    all: &TokenSet3D,
    j: usize,
    f_t: usize,
) -> Result<TokenSet3D> {
    all.validate(tape)?;
    if j == 0 {
        return Err(Error::InvalidArg(
            "pose grouping: latent frame index must be >= 1".into(),
        ));
    }
    if f_t == 0 {
        return Err(Error::InvalidArg("pose grouping: f_t must be positive".into()));
    }
    let lo = 1 + f_t * (j - 1);
    let hi = 1 + f_t * j;
    let selected: Vec<usize> = (0..all.frames.len())
        .filter(|&i| (lo..=hi).contains(&all.frames[i]))
        .collect();
    let d = tape.shape(all.tokens)[1];
    let tokens = if selected.is_empty() {
        tape.constant(Tensor::zeros(&[0, d]))
    } else {
        // Contiguous runs of indices become one slice each.
        let mut parts = Vec::new();
        let mut run_start = selected[0];
        let mut run_len = 1usize;
        for pair in selected.windows(2) {
            if pair[1] == pair[0] + 1 {
                run_len += 1;
            } else {
                parts.push(tape.slice(all.tokens, 0, run_start, run_len)?);
                run_start = pair[1];
                run_len = 1;
            }
        }
        parts.push(tape.slice(all.tokens, 0, run_start, run_len)?);
        if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts, 0)?
        }
    };
    Ok(TokenSet3D {
        tokens,
        coords: selected.iter().map(|&i| all.coords[i]).collect(),
        frames: selected.iter().map(|&i| all.frames[i]).collect(),
        persons: selected.iter().map(|&i| all.persons[i]).collect(),
    })
}

// -- interspatial positional encoding ---------------------------------------

/// Sinusoidal encoding of one NDC point into `dim` channels. NDC has three
/// coordinates, so the encoded width is the largest multiple of 6 not above
/// `dim`; any remaining channels are zero.
fn ndc_pe(ndc: Vec3, dim: usize) -> Result<Vec<f32>> {
    let used = dim - dim % 6;
    if used == 0 {
        return Err(Error::InvalidArg(format!(
            "positional encoding width {dim} is too small for 3 coordinates"
        )));
    }
    let mut pe = sinusoidal_pe(&[ndc[0] as f32, ndc[1] as f32, ndc[2] as f32], used)?;
    pe.resize(dim, 0.0);
    Ok(pe)
}

/// ISPE for world-space tokens: project each point to NDC through `proj`,
/// then encode sinusoidally. `[n, dim]`.
pub fn ispe_encode_3d(points: &[Vec3], proj: &ProjectionMatrix, dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(points.len() * dim);
    for &g in points {
        data.extend(ndc_pe(ndc_project(g, proj)?, dim)?);
    }
    Tensor::from_vec(&[points.len(), dim], data)
}

/// ISPE for screen tokens: place each latent-pixel position on the zero-depth
/// NDC plane, then encode sinusoidally. `[n, dim]`.
pub fn ispe_encode_2d(
    coords: &[(f64, f64)],
    width: usize,
    height: usize,
    dim: usize,
) -> Result<Tensor> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArg("ISPE: zero latent extent".into()));
    }
    let mut data = Vec::with_capacity(coords.len() * dim);
    for &(sx, sy) in coords {
        data.extend(ndc_pe(pixel_to_ndc(sx, sy, width, height), dim)?);
    }
    Tensor::from_vec(&[coords.len(), dim], data)
}

/// Symmetric interspatial attention between one latent frame's screen tokens
/// and its pose tokens: `z'` attends 2D -> 3D with `params_2d`, `y'` attends
/// 3D -> 2D with `params_3d`, and both directions share the same ISPE
/// vectors. Returns `(z', y')`.
pub fn isa_symmetric(
    tape: &mut Tape,
    p: &Bound,
    z: &TokenSet2D,
    y: &TokenSet3D,
    proj: &ProjectionMatrix,
    params_2d: &AttentionParams,
    params_3d: &AttentionParams,
) -> Result<(Var, Var)> {
    z.validate(tape)?;
    y.validate(tape)?;
    let dz = tape.shape(z.tokens)[1];
    let dy = tape.shape(y.tokens)[1];
    let pe_z = tape.constant(ispe_encode_2d(&z.coords, z.width, z.height, dz)?);
    let pe_y = tape.constant(ispe_encode_3d(&y.coords, proj, dy)?);
    let z_out = isa_attention(tape, p, params_2d, z.tokens, pe_z, y.tokens, pe_y)?;
    let y_out = isa_attention(tape, p, params_3d, y.tokens, pe_y, z.tokens, pe_z)?;
    Ok((z_out, y_out))
}

// -- blocks ------------------------------------------------------------------

/// Two-layer feed-forward with GELU and width expansion
/// [`FFN_EXPANSION`].
pub struct FeedForward {
    lin1: Affine,
    lin2: Affine,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) -> Self {
        FeedForward {
            lin1: Affine::new(store, rng, &format!("{prefix}.f1"), d, FFN_EXPANSION * d, false),
            lin2: Affine::new(store, rng, &format!("{prefix}.f2"), FFN_EXPANSION * d, d, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.lin1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.lin2.forward(tape, p, h)
    }
}

/// Norms and feed-forward of one pre-norm transformer block; the attention
/// inside is supplied per call site.
pub struct TransformerBlockParams {
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlockParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) -> Self {
        TransformerBlockParams {
            ln1: LayerNorm::new(store, rng, &format!("{prefix}.ln1"), d),
            ln2: LayerNorm::new(store, rng, &format!("{prefix}.ln2"), d),
            ffn: FeedForward::new(store, rng, &format!("{prefix}.ffn"), d),
        }
    }
}

/// Pre-norm transformer block: `x + attn(LN(x))`, then `x + FFN(LN(x))`.
/// `attn` receives the normalized tokens and returns the attention output.
pub fn transformer_block<F>(
    tape: &mut Tape,
    p: &Bound,
    params: &TransformerBlockParams,
    x: Var,
    attn: F,
) -> Result<Var>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let nx = params.ln1.forward(tape, p, x)?;
    let a = attn(tape, nx)?;
    let x = tape.add(x, a)?;
    let nx = params.ln2.forward(tape, p, x)?;
    let f = params.ffn.forward(tape, p, nx)?;
    tape.add(x, f)
}

/// Parameters of one symmetric ISA transformer block: independent attention
/// parameter sets for the two directions plus per-stream norms and
/// feed-forwards.
pub struct IsaBlockParams {
    pub attn_2d: AttentionParams,
    pub attn_3d: AttentionParams,
    pub ln_z1: LayerNorm,
    pub ln_y1: LayerNorm,
    pub ln_z2: LayerNorm,
    pub ln_y2: LayerNorm,
    pub ffn_z: FeedForward,
    pub ffn_y: FeedForward,
}

impl IsaBlockParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(IsaBlockParams {
            attn_2d: AttentionParams::new(store, rng, &format!("{prefix}.a2d"), d, d, d, heads)?,
            attn_3d: AttentionParams::new(store, rng, &format!("{prefix}.a3d"), d, d, d, heads)?,
            ln_z1: LayerNorm::new(store, rng, &format!("{prefix}.lnz1"), d),
            ln_y1: LayerNorm::new(store, rng, &format!("{prefix}.lny1"), d),
            ln_z2: LayerNorm::new(store, rng, &format!("{prefix}.lnz2"), d),
            ln_y2: LayerNorm::new(store, rng, &format!("{prefix}.lny2"), d),
            ffn_z: FeedForward::new(store, rng, &format!("{prefix}.ffnz"), d),
            ffn_y: FeedForward::new(store, rng, &format!("{prefix}.ffny"), d),
        })
    }
}

/// Symmetric ISA transformer block: both streams get pre-norm, symmetric
/// ISA, a residual add, then a pre-norm feed-forward with residual. Returns
/// the updated `(z, y)` token features.
pub fn isa_transformer_block(
    tape: &mut Tape,
    p: &Bound,
    params: &IsaBlockParams,
    z: &TokenSet2D,
    y: &TokenSet3D,
    proj: &ProjectionMatrix,
) -> Result<(Var, Var)> {
    let zn = params.ln_z1.forward(tape, p, z.tokens)?;
    let yn = params.ln_y1.forward(tape, p, y.tokens)?;
    let z_normed = TokenSet2D {
        tokens: zn,
        ..z.clone()
    };
    let y_normed = TokenSet3D {
        tokens: yn,
        ..y.clone()
    };
    let (z_attn, y_attn) = isa_symmetric(
        tape,
        p,
        &z_normed,
        &y_normed,
        proj,
        &params.attn_2d,
        &params.attn_3d,
    )?;
    let z1 = tape.add(z.tokens, z_attn)?;
    let y1 = tape.add(y.tokens, y_attn)?;
    let zf = params.ln_z2.forward(tape, p, z1)?;
    let zf = params.ffn_z.forward(tape, p, zf)?;
    let z2 = tape.add(z1, zf)?;
    let yf = params.ln_y2.forward(tape, p, y1)?;
    let yf = params.ffn_y.forward(tape, p, yf)?;
    let y2 = tape.add(y1, yf)?;
    Ok((z2, y2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_projection, CameraPose};
    use crate::kernels;
    use crate::nn::Init;
    use crate::rng::substream;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = substream(seed, "attn-test", 0);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0f32)).collect()).unwrap()
    }

    /// f64 dense matmul oracle: `[n, a] * [a, b]`.
    fn mm(x: &Tensor, w: &Tensor) -> Vec<f64> {
        let (n, a) = (x.shape()[0], x.shape()[1]);
        let b = w.shape()[1];
        let mut out = vec![0.0f64; n * b];
        for i in 0..n {
            for j in 0..b {
                let mut s = 0.0f64;
                for t in 0..a {
                    s += x.data()[i * a + t] as f64 * w.data()[t * b + j] as f64;
                }
                out[i * b + j] = s;
            }
        }
        out
    }

    /// Dense multi-head attention oracle in f64: softmax over all keys per
    /// head, concatenated, then the output projection.
    fn dense_oracle(
        x: &Tensor,
        y: &Tensor,
        wq: &Tensor,
        wk: &Tensor,
        wv: &Tensor,
        wo: &Tensor,
        heads: usize,
    ) -> Vec<f64> {
        let n = x.shape()[0];
        let m = y.shape()[0];
        let d = wq.shape()[1];
        let dh = d / heads;
        let q = mm(x, wq);
        let k = mm(y, wk);
        let v = mm(y, wv);
        let mut ctx = vec![0.0f64; n * d];
        for h in 0..heads {
            for i in 0..n {
                let mut scores = vec![0.0f64; m];
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for t in 0..dh {
                        acc += q[i * d + h * dh + t] * k[j * d + h * dh + t];
                    }
                    *s = acc / (dh as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for t in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += exps[j] / denom * v[j * d + h * dh + t];
                    }
                    ctx[i * d + h * dh + t] = acc;
                }
            }
        }
        // Output projection.
        let mut out = vec![0.0f64; n * d];
        for i in 0..n {
            for j in 0..d {
                let mut s = 0.0;
                for t in 0..d {
                    s += ctx[i * d + t] * wo.data()[t * d + j] as f64;
                }
                out[i * d + j] = s;
            }
        }
        out
    }

    fn params_with_store(
        seed: u64,
        d: usize,
        d_x: usize,
        d_y: usize,
        heads: usize,
    ) -> (ParamStore, AttentionParams) {
        let mut store = ParamStore::new();
        let mut rng = substream(seed, "attn-params", 0);
        let params = AttentionParams::new(&mut store, &mut rng, "t", d, d_x, d_y, heads).unwrap();
        (store, params)
    }

    #[test]
    fn single_token_self_attention_is_output_of_value_projection() {
        let (store, params) = params_with_store(1, 8, 8, 8, 2);
        let x = rand_tensor(&[1, 8], 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self_attention(&mut tape, &p, &params, xv).unwrap();
        // One key: softmax weight is exactly 1, so out = (x Wv) Wo.
        let v = mm(&x, store.get("t.v.w").unwrap());
        let vt = Tensor::from_vec(&[1, 8], v.iter().map(|&f| f as f32).collect()).unwrap();
        let want = mm(&vt, store.get("t.o.w").unwrap());
        for (a, b) in tape.value(out).data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn identical_tokens_produce_identical_outputs() {
        let (store, params) = params_with_store(3, 8, 8, 8, 4);
        let row = rand_tensor(&[1, 8], 4);
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(row.data());
        }
        let x = Tensor::from_vec(&[5, 8], data).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x);
        let out = self_attention(&mut tape, &p, &params, xv).unwrap();
        let o = tape.value(out).data();
        for r in 1..5 {
            assert_eq!(&o[..8], &o[r * 8..(r + 1) * 8]);
        }
    }

    #[test]
    fn four_token_self_attention_matches_dense_oracle() {
        let (store, params) = params_with_store(5, 8, 8, 8, 2);
        let x = rand_tensor(&[4, 8], 6);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self_attention(&mut tape, &p, &params, xv).unwrap();
        let want = dense_oracle(
            &x,
            &x,
            store.get("t.q.w").unwrap(),
            store.get("t.k.w").unwrap(),
            store.get("t.v.w").unwrap(),
            store.get("t.o.w").unwrap(),
            2,
        );
        for (a, b) in tape.value(out).data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn self_attention_rejects_width_mismatch() {
        let (store, params) = params_with_store(7, 8, 8, 8, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(rand_tensor(&[3, 6], 8));
        assert!(self_attention(&mut tape, &p, &params, xv).is_err());
    }

    #[test]
    fn single_key_cross_attention_ignores_query_values() {
        let (store, params) = params_with_store(9, 8, 8, 5, 2);
        let y = rand_tensor(&[1, 5], 10);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let yv = tape.constant(y.clone());
        let x1 = tape.constant(rand_tensor(&[3, 8], 11));
        let x2 = tape.constant(rand_tensor(&[3, 8], 12));
        let o1 = cross_attention(&mut tape, &p, &params, x1, yv).unwrap();
        let o2 = cross_attention(&mut tape, &p, &params, x2, yv).unwrap();
        assert_eq!(tape.value(o1).data(), tape.value(o2).data());
        let v = mm(&y, store.get("t.v.w").unwrap());
        let vt = Tensor::from_vec(&[1, 8], v.iter().map(|&f| f as f32).collect()).unwrap();
        let want = mm(&vt, store.get("t.o.w").unwrap());
        for row in 0..3 {
            for (a, b) in tape.value(o1).data()[row * 8..(row + 1) * 8].iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn cross_attention_is_bit_exact_under_key_permutation() {
        let (store, params) = params_with_store(13, 8, 8, 6, 2);
        let x = rand_tensor(&[3, 8], 14);
        let y = rand_tensor(&[7, 6], 15);
        let perm = [4usize, 1, 6, 0, 3, 5, 2];
        let mut ydata = Vec::new();
        for &pi in &perm {
            ydata.extend_from_slice(&y.data()[pi * 6..(pi + 1) * 6]);
        }
        let yp = Tensor::from_vec(&[7, 6], ydata).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x);
        let y1 = tape.constant(y);
        let y2 = tape.constant(yp);
        let o1 = cross_attention(&mut tape, &p, &params, xv, y1).unwrap();
        let o2 = cross_attention(&mut tape, &p, &params, xv, y2).unwrap();
        assert_eq!(tape.value(o1).data(), tape.value(o2).data());
    }

    #[test]
    fn cross_attention_matches_dense_oracle() {
        let (store, params) = params_with_store(17, 8, 8, 5, 2);
        let x = rand_tensor(&[4, 8], 18);
        let y = rand_tensor(&[6, 5], 19);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let out = cross_attention(&mut tape, &p, &params, xv, yv).unwrap();
        let want = dense_oracle(
            &x,
            &y,
            store.get("t.q.w").unwrap(),
            store.get("t.k.w").unwrap(),
            store.get("t.v.w").unwrap(),
            store.get("t.o.w").unwrap(),
            2,
        );
        for (a, b) in tape.value(out).data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_weights_are_row_stochastic() {
        // Projections taken from a real parameter set; the probability matrix
        // must sum to one per query row.
        let (store, params) = params_with_store(21, 8, 8, 8, 2);
        let x = rand_tensor(&[5, 8], 22);
        let q: Vec<f32> = mm(&x, store.get("t.q.w").unwrap())
            .iter()
            .map(|&v| v as f32)
            .collect();
        let k: Vec<f32> = mm(&x, store.get("t.k.w").unwrap())
            .iter()
            .map(|&v| v as f32)
            .collect();
        let dh = params.d / params.heads;
        for h in 0..params.heads {
            let qh: Vec<f32> = (0..5)
                .flat_map(|i| q[i * 8 + h * dh..i * 8 + (h + 1) * dh].to_vec())
                .collect();
            let kh: Vec<f32> = (0..5)
                .flat_map(|i| k[i * 8 + h * dh..i * 8 + (h + 1) * dh].to_vec())
                .collect();
            let mut probs = vec![0.0f32; 25];
            kernels::attention_probs(
                &qh,
                &kh,
                &kh,
                1.0 / (dh as f32).sqrt(),
                &mut probs,
                5,
                5,
                dh,
                dh,
            );
            for row in probs.chunks(5) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            }
        }
    }

    fn pose_set(tape: &mut Tape, persons: usize, frames_per: usize, d: usize, seed: u64) -> TokenSet3D {
        let m = persons * frames_per;
        let tokens = tape.constant(rand_tensor(&[m, d], seed));
        let mut coords = Vec::new();
        let mut frames = Vec::new();
        let mut pids = Vec::new();
        for person in 0..persons {
            for f in 1..=frames_per {
                coords.push([f as f64 * 0.1, person as f64, 1.0 + f as f64 * 0.01]);
                frames.push(f);
                pids.push(person);
            }
        }
        TokenSet3D {
            tokens,
            coords,
            frames,
            persons: pids,
        }
    }

    #[test]
    fn pose_grouping_selects_the_closed_frame_range() {
        let mut tape = Tape::new();
        let all = pose_set(&mut tape, 1, 9, 4, 30);
        let g1 = group_pose_frames(&mut tape, &all, 1, 4).unwrap();
        assert_eq!(g1.frames, vec![1, 2, 3, 4, 5]);
        let g2 = group_pose_frames(&mut tape, &all, 2, 4).unwrap();
        assert_eq!(g2.frames, vec![5, 6, 7, 8, 9]);
        // Token values follow the selection.
        let full = tape.value(all.tokens).data().to_vec();
        assert_eq!(tape.value(g2.tokens).data(), &full[4 * 4..9 * 4]);
        assert!(group_pose_frames(&mut tape, &all, 0, 4).is_err());
    }

    #[test]
    fn pose_grouping_keeps_every_person() {
        let mut tape = Tape::new();
        let one = pose_set(&mut tape, 1, 9, 4, 31);
        let two = pose_set(&mut tape, 2, 9, 4, 31);
        let g1 = group_pose_frames(&mut tape, &one, 1, 4).unwrap();
        let g2 = group_pose_frames(&mut tape, &two, 1, 4).unwrap();
        assert_eq!(g2.frames.len(), 2 * g1.frames.len());
        assert_eq!(&g2.frames[..5], &g1.frames[..]);
        assert_eq!(&g2.frames[5..], &g1.frames[..]);
        assert_eq!(g2.persons[..5], vec![0; 5]);
        assert_eq!(g2.persons[5..], vec![1; 5]);
    }

    #[test]
    fn pose_grouping_with_no_matching_frames_is_empty() {
        let mut tape = Tape::new();
        let all = pose_set(&mut tape, 1, 3, 4, 32);
        let g = group_pose_frames(&mut tape, &all, 2, 4).unwrap();
        assert!(g.frames.is_empty());
        assert_eq!(tape.shape(g.tokens), &[0, 4]);
    }

    fn test_camera(w: usize, h: usize) -> CameraPose {
        CameraPose::look_at(
            [0.0, 1.0, -3.0],
            [0.0, 0.9, 0.0],
            [0.0, 1.0, 0.0],
            (1.1 * w as f64, 1.1 * w as f64, w as f64 / 2.0, h as f64 / 2.0),
            0.1,
            100.0,
        )
        .unwrap()
    }

    #[test]
    fn screen_center_token_encodes_like_the_ndc_origin() {
        let pe = ispe_encode_2d(&[(8.0, 8.0)], 16, 16, 12).unwrap();
        let want = sinusoidal_pe(&[0.0, 0.0, 0.0], 12).unwrap();
        assert_eq!(pe.data(), &want[..]);
        // Corners land on (+-1, +-1, 0).
        let pe = ispe_encode_2d(&[(0.0, 16.0)], 16, 16, 12).unwrap();
        let want = sinusoidal_pe(&[-1.0, 1.0, 0.0], 12).unwrap();
        assert_eq!(pe.data(), &want[..]);
    }

    #[test]
    fn world_point_on_the_center_ray_matches_the_center_pixel_encoding() {
        let cam = test_camera(16, 16);
        let proj = build_projection(&cam, 16, 16).unwrap();
        // Point on the optical axis at the depth where NDC z crosses zero:
        // z_cam = 2 f n / (f + n).
        let z = 2.0 * 100.0 * 0.1 / 100.1;
        let r = &cam.rotation;
        let t = cam.translation;
        // g = R^T (p_cam - t).
        let pc = [0.0, 0.0, z];
        let g = [
            r[0][0] * (pc[0] - t[0]) + r[1][0] * (pc[1] - t[1]) + r[2][0] * (pc[2] - t[2]),
            r[0][1] * (pc[0] - t[0]) + r[1][1] * (pc[1] - t[1]) + r[2][1] * (pc[2] - t[2]),
            r[0][2] * (pc[0] - t[0]) + r[1][2] * (pc[1] - t[1]) + r[2][2] * (pc[2] - t[2]),
        ];
        let pe3 = ispe_encode_3d(&[g], &proj, 12).unwrap();
        let pe2 = ispe_encode_2d(&[(8.0, 8.0)], 16, 16, 12).unwrap();
        for (a, b) in pe3.data().iter().zip(pe2.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn ispe_composition_matches_manual_pipeline() {
        let cam = test_camera(16, 16);
        let proj = build_projection(&cam, 16, 16).unwrap();
        let g = [0.3, 0.8, 0.4];
        let pe = ispe_encode_3d(&[g], &proj, 18).unwrap();
        let ndc = ndc_project(g, &proj).unwrap();
        let want =
            sinusoidal_pe(&[ndc[0] as f32, ndc[1] as f32, ndc[2] as f32], 18).unwrap();
        assert_eq!(pe.data(), &want[..]);
        // Padded width: trailing channels are zero, prefix matches.
        let pe = ispe_encode_3d(&[g], &proj, 20).unwrap();
        assert_eq!(&pe.data()[..18], &want[..]);
        assert_eq!(&pe.data()[18..], &[0.0, 0.0]);
    }

    #[test]
    fn equal_world_points_share_encodings() {
        let cam = test_camera(16, 16);
        let proj = build_projection(&cam, 16, 16).unwrap();
        let g = [0.1, 0.9, -0.2];
        let pe = ispe_encode_3d(&[g, g], &proj, 12).unwrap();
        assert_eq!(&pe.data()[..12], &pe.data()[12..]);
    }

    #[test]
    fn isa_with_zero_encodings_is_cross_attention() {
        let (store, params) = params_with_store(40, 8, 8, 8, 2);
        let x = rand_tensor(&[3, 8], 41);
        let y = rand_tensor(&[5, 8], 42);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let zx = tape.constant(Tensor::zeros(&[3, 8]));
        let zy = tape.constant(Tensor::zeros(&[5, 8]));
        let a = isa_attention(&mut tape, &p, &params, xv, zx, yv, zy).unwrap();
        let b = cross_attention(&mut tape, &p, &params, xv, yv).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn isa_key_permutation_with_encodings_is_bit_exact() {
        let (store, params) = params_with_store(43, 8, 8, 8, 2);
        let x = rand_tensor(&[3, 8], 44);
        let y = rand_tensor(&[6, 8], 45);
        let pe_y = rand_tensor(&[6, 8], 46);
        let perm = [5usize, 2, 0, 4, 1, 3];
        let permuted = |t: &Tensor| {
            let mut data = Vec::new();
            for &pi in &perm {
                data.extend_from_slice(&t.data()[pi * 8..(pi + 1) * 8]);
            }
            Tensor::from_vec(&[6, 8], data).unwrap()
        };
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x);
        let pe_x = tape.constant(rand_tensor(&[3, 8], 47));
        let y1 = tape.constant(y.clone());
        let p1 = tape.constant(pe_y.clone());
        let y2 = tape.constant(permuted(&y));
        let p2 = tape.constant(permuted(&pe_y));
        let o1 = isa_attention(&mut tape, &p, &params, xv, pe_x, y1, p1).unwrap();
        let o2 = isa_attention(&mut tape, &p, &params, xv, pe_x, y2, p2).unwrap();
        assert_eq!(tape.value(o1).data(), tape.value(o2).data());
    }

    #[test]
    fn isa_rejects_mismatched_encoding_widths() {
        let (store, params) = params_with_store(48, 8, 8, 8, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(rand_tensor(&[3, 8], 49));
        let bad_pe = tape.constant(rand_tensor(&[3, 6], 50));
        let yv = tape.constant(rand_tensor(&[5, 8], 51));
        let pe_y = tape.constant(rand_tensor(&[5, 8], 52));
        assert!(isa_attention(&mut tape, &p, &params, xv, bad_pe, yv, pe_y).is_err());
    }

    fn screen_set(tape: &mut Tape, n_side: usize, d: usize, seed: u64) -> TokenSet2D {
        let tokens = tape.constant(rand_tensor(&[n_side * n_side, d], seed));
        let mut coords = Vec::new();
        for y in 0..n_side {
            for x in 0..n_side {
                coords.push((x as f64 + 0.5, y as f64 + 0.5));
            }
        }
        TokenSet2D {
            tokens,
            coords,
            width: n_side,
            height: n_side,
            frame: 1,
        }
    }

    #[test]
    fn symmetric_isa_preserves_counts_and_degenerates_to_value_paths() {
        let mut store = ParamStore::new();
        let mut rng = substream(60, "attn-params", 0);
        let p2 = AttentionParams::new(&mut store, &mut rng, "p2", 8, 8, 8, 2).unwrap();
        let p3 = AttentionParams::new(&mut store, &mut rng, "p3", 8, 8, 8, 2).unwrap();
        let cam = test_camera(16, 16);
        let proj = build_projection(&cam, 16, 16).unwrap();

        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let z = screen_set(&mut tape, 2, 8, 61);
        let y = pose_set(&mut tape, 2, 5, 8, 62);
        let (z_out, y_out) = isa_symmetric(&mut tape, &p, &z, &y, &proj, &p2, &p3).unwrap();
        assert_eq!(tape.shape(z_out), &[4, 8]);
        assert_eq!(tape.shape(y_out), &[10, 8]);

        // Single token on each side: both outputs are single-key attention,
        // i.e. the value projection of the other side's PE-augmented token.
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let z1 = TokenSet2D {
            tokens: tape.constant(rand_tensor(&[1, 8], 63)),
            coords: vec![(0.5, 0.5)],
            width: 1,
            height: 1,
            frame: 1,
        };
        let y1 = TokenSet3D {
            tokens: tape.constant(rand_tensor(&[1, 8], 64)),
            coords: vec![[0.0, 0.9, 0.2]],
            frames: vec![1],
            persons: vec![0],
        };
        let (z_out, y_out) = isa_symmetric(&mut tape, &p, &z1, &y1, &proj, &p2, &p3).unwrap();
        let pe_y = ispe_encode_3d(&y1.coords, &proj, 8).unwrap();
        let mut y_aug = tape.value(y1.tokens).clone();
        for (a, b) in y_aug.data_mut().iter_mut().zip(pe_y.data()) {
            *a += b;
        }
        let v = mm(&y_aug, store.get("p2.v.w").unwrap());
        let vt = Tensor::from_vec(&[1, 8], v.iter().map(|&f| f as f32).collect()).unwrap();
        let want = mm(&vt, store.get("p2.o.w").unwrap());
        for (a, b) in tape.value(z_out).data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
        assert_eq!(tape.shape(y_out), &[1, 8]);
    }

    #[test]
    fn symmetric_isa_with_empty_pose_set_gives_zero_context() {
        let mut store = ParamStore::new();
        let mut rng = substream(65, "attn-params", 0);
        let p2 = AttentionParams::new(&mut store, &mut rng, "p2", 8, 8, 8, 2).unwrap();
        let p3 = AttentionParams::new(&mut store, &mut rng, "p3", 8, 8, 8, 2).unwrap();
        let cam = test_camera(16, 16);
        let proj = build_projection(&cam, 16, 16).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let z = screen_set(&mut tape, 2, 8, 66);
        let y = TokenSet3D {
            tokens: tape.constant(Tensor::zeros(&[0, 8])),
            coords: vec![],
            frames: vec![],
            persons: vec![],
        };
        let (z_out, y_out) = isa_symmetric(&mut tape, &p, &z, &y, &proj, &p2, &p3).unwrap();
        assert!(tape.value(z_out).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(y_out), &[0, 8]);
    }

    #[test]
    fn transformer_block_with_zero_weights_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = substream(70, "attn-params", 0);
        let attn = AttentionParams::self_params(&mut store, &mut rng, "a", 8, 2).unwrap();
        let block = TransformerBlockParams::new(&mut store, &mut rng, "b", 8);
        for name in attn.weight_names() {
            store.set(&name, Tensor::zeros(store.get(&name).unwrap().shape()));
        }
        for name in ["b.ffn.f1.w", "b.ffn.f1.b", "b.ffn.f2.w", "b.ffn.f2.b"] {
            store.set(name, Tensor::zeros(store.get(name).unwrap().shape()));
        }
        let x = rand_tensor(&[5, 8], 71);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = transformer_block(&mut tape, &p, &block, xv, |tape, nx| {
            self_attention(tape, &p, &attn, nx)
        })
        .unwrap();
        assert_eq!(tape.value(out).data(), x.data());
    }

    #[test]
    fn transformer_block_preserves_shape() {
        let mut store = ParamStore::new();
        let mut rng = substream(72, "attn-params", 0);
        let attn = AttentionParams::self_params(&mut store, &mut rng, "a", 8, 2).unwrap();
        let block = TransformerBlockParams::new(&mut store, &mut rng, "b", 8);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(rand_tensor(&[6, 8], 73));
        let out = transformer_block(&mut tape, &p, &block, xv, |tape, nx| {
            self_attention(tape, &p, &attn, nx)
        })
        .unwrap();
        assert_eq!(tape.shape(out), &[6, 8]);
    }

    /// Finite-difference check of every (input + parameter) coordinate with
    /// an atol + rtol acceptance like `|g - fd| <= atol + rtol * max(|g|,
    /// |fd|)`. The f32 loss quantizes central differences to multiples of
    /// `ulp(loss) / 2h`, so coordinates whose true gradient sits near that
    /// noise floor need the absolute tolerance; well-resolved coordinates
    /// still must match to `rtol`.
    fn fd_check<F>(build: F, inputs: &[Tensor], h: f32, rtol: f64, atol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        let eval = |tensors: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &vars).unwrap();
            tape.value(loss).data()[0] as f64
        };
        for (ti, t) in inputs.iter().enumerate() {
            let g = grads.get(vars[ti]).unwrap();
            for ci in 0..t.numel() {
                let mut plus = inputs.to_vec();
                plus[ti].data_mut()[ci] += h;
                let mut minus = inputs.to_vec();
                minus[ti].data_mut()[ci] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
                let gv = g.data()[ci] as f64;
                let tol = atol + rtol * gv.abs().max(fd.abs());
                assert!(
                    (gv - fd).abs() <= tol,
                    "tensor {ti} coord {ci}: analytic {gv:.6e} vs fd {fd:.6e}"
                );
            }
        }
    }

    /// Gradcheck a closure over (input tokens + every parameter) by binding
    /// perturbed leaves under the store's parameter names.
    fn block_gradcheck<F>(store: &ParamStore, x: Tensor, forward: F)
    where
        F: Fn(&mut Tape, &Bound, Var) -> Result<Var>,
    {
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        let mut inputs = vec![x];
        for n in &names {
            inputs.push(store.get(n).unwrap().clone());
        }
        fd_check(
            |tape, vars| {
                let mut bound = Bound::default();
                for (n, v) in names.iter().zip(&vars[1..]) {
                    bound.insert(n, *v);
                }
                let out = forward(tape, &bound, vars[0])?;
                let sq = tape.sqr(out);
                Ok(tape.sum_all(sq))
            },
            &inputs,
            1e-3,
            1e-2,
            1e-2,
        );
    }

    #[test]
    fn transformer_block_gradcheck() {
        let mut store = ParamStore::new();
        let mut rng = substream(74, "attn-params", 0);
        let attn = AttentionParams::self_params(&mut store, &mut rng, "a", 8, 2).unwrap();
        let block = TransformerBlockParams::new(&mut store, &mut rng, "b", 8);
        // A zero-initialized residual output layer has zero gradients flowing
        // around it at the check point; nudge it off zero.
        let mut rng2 = substream(75, "attn-params", 1);
        let f2 = store.get("b.ffn.f2.w").unwrap().shape().to_vec();
        let mut nudged = ParamStore::new();
        nudged.register("tmp", &f2, Init::Normal(0.1), &mut rng2);
        store.set("b.ffn.f2.w", nudged.get("tmp").unwrap().clone());

        block_gradcheck(&store, rand_tensor(&[3, 8], 76), |tape, bound, x| {
            transformer_block(tape, bound, &block, x, |tape, nx| {
                self_attention(tape, bound, &attn, nx)
            })
        });
    }

    #[test]
    fn isa_block_with_zero_weights_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = substream(80, "attn-params", 0);
        let params = IsaBlockParams::new(&mut store, &mut rng, "ib", 8, 2).unwrap();
        for name in params
            .attn_2d
            .weight_names()
            .into_iter()
            .chain(params.attn_3d.weight_names())
        {
            store.set(&name, Tensor::zeros(store.get(&name).unwrap().shape()));
        }
        for name in [
            "ib.ffnz.f1.w",
            "ib.ffnz.f1.b",
            "ib.ffnz.f2.w",
            "ib.ffnz.f2.b",
            "ib.ffny.f1.w",
            "ib.ffny.f1.b",
            "ib.ffny.f2.w",
            "ib.ffny.f2.b",
        ] {
            store.set(name, Tensor::zeros(store.get(name).unwrap().shape()));
        }
        let cam = test_camera(16, 16);
        let proj = build_projection(&cam, 16, 16).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let z = screen_set(&mut tape, 2, 8, 81);
        let y = pose_set(&mut tape, 1, 5, 8, 82);
        let zt = tape.value(z.tokens).data().to_vec();
        let yt = tape.value(y.tokens).data().to_vec();
        let (z_out, y_out) = isa_transformer_block(&mut tape, &p, &params, &z, &y, &proj).unwrap();
        assert_eq!(tape.value(z_out).data(), &zt[..]);
        assert_eq!(tape.value(y_out).data(), &yt[..]);
    }

    #[test]
    fn isa_block_is_invariant_to_person_block_swap() {
        let mut store = ParamStore::new();
        let mut rng = substream(83, "attn-params", 0);
        let params = IsaBlockParams::new(&mut store, &mut rng, "ib", 8, 2).unwrap();
        let cam = test_camera(16, 16);
        let proj = build_projection(&cam, 16, 16).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let z = screen_set(&mut tape, 2, 8, 84);
        let y = pose_set(&mut tape, 2, 5, 8, 85);
        // Swap the two person blocks (rows 0..5 and 5..10 plus metadata).
        let yt = tape.value(y.tokens).clone();
        let mut swapped = yt.data()[5 * 8..].to_vec();
        swapped.extend_from_slice(&yt.data()[..5 * 8]);
        let y_swapped = TokenSet3D {
            tokens: tape.constant(Tensor::from_vec(&[10, 8], swapped).unwrap()),
            coords: y.coords[5..].iter().chain(&y.coords[..5]).cloned().collect(),
            frames: y.frames[5..].iter().chain(&y.frames[..5]).cloned().collect(),
            persons: y.persons[5..].iter().chain(&y.persons[..5]).cloned().collect(),
        };
        let (z1, _) = isa_transformer_block(&mut tape, &p, &params, &z, &y, &proj).unwrap();
        let (z2, _) = isa_transformer_block(&mut tape, &p, &params, &z, &y_swapped, &proj).unwrap();
        assert_eq!(tape.value(z1).data(), tape.value(z2).data());
    }

    #[test]
    fn isa_block_gradcheck() {
        let mut store = ParamStore::new();
        let mut rng = substream(86, "attn-params", 0);
        let params = IsaBlockParams::new(&mut store, &mut rng, "ib", 6, 2).unwrap();
        // Zero-initialized residual outputs get the same nudge as in the
        // transformer block check.
        let mut rng2 = substream(87, "attn-params", 1);
        for name in ["ib.ffnz.f2.w", "ib.ffny.f2.w"] {
            let shape = store.get(name).unwrap().shape().to_vec();
            let mut tmp = ParamStore::new();
            tmp.register("tmp", &shape, Init::Normal(0.1), &mut rng2);
            store.set(name, tmp.get("tmp").unwrap().clone());
        }
        let cam = test_camera(16, 16);
        let proj = build_projection(&cam, 16, 16).unwrap();
        let z_coords = vec![(0.5, 0.5), (1.5, 0.5)];
        let y_meta: (Vec<Vec3>, Vec<usize>, Vec<usize>) = (
            vec![[0.1, 0.9, 0.2], [0.0, 1.2, 0.1], [0.2, 0.5, 0.3]],
            vec![1, 2, 3],
            vec![0, 0, 0],
        );
        let y_tokens = rand_tensor(&[3, 6], 88);

        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        let mut inputs = vec![rand_tensor(&[2, 6], 89), y_tokens];
        for n in &names {
            inputs.push(store.get(n).unwrap().clone());
        }
        fd_check(
            |tape, vars| {
                let mut bound = Bound::default();
                for (n, v) in names.iter().zip(&vars[2..]) {
                    bound.insert(n, *v);
                }
                let z = TokenSet2D {
                    tokens: vars[0],
                    coords: z_coords.clone(),
                    width: 2,
                    height: 1,
                    frame: 1,
                };
                let y = TokenSet3D {
                    tokens: vars[1],
                    coords: y_meta.0.clone(),
                    frames: y_meta.1.clone(),
                    persons: y_meta.2.clone(),
                };
                let (z_out, y_out) =
                    isa_transformer_block(tape, &bound, &params, &z, &y, &proj)?;
                let zs = tape.sqr(z_out);
                let ys = tape.sqr(y_out);
                let zl = tape.sum_all(zs);
                let yl = tape.sum_all(ys);
                tape.add(zl, yl)
            },
            &inputs,
            1e-3,
            1e-2,
            1e-2,
        );
    }
}
