//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! A [`Tape`] owns an append-only arena of nodes; every op pushes one node
//! whose parents already exist, so the arena index order is a topological
//! order. [`Tape::backward`] walks the arena once in reverse, accumulating
//! gradients additively into each node (leaves included) exactly once per use.
//!
//! All values are `f32`. Gradient-check tolerances elsewhere in the crate are
//! calibrated for this precision (1e-2 relative error with a 1e-6 absolute
//! floor in the denominator).

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, Conv3dSpec};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Elementwise unary operations.
#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Relu,
    Gelu,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Sqr,
    Sqrt,
    Clamp(f32, f32),
    Scale(f32),
    AddScalar(f32),
}

/// Binary elementwise operations with trailing-dimension broadcasting on the
/// right operand.
#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// How the right operand broadcasts against the left.
#[derive(Debug, Clone, Copy)]
enum Broadcast {
    /// Identical shapes.
    Same,
    /// Right operand is a single scalar.
    ScalarRhs,
    /// Right shape is a trailing suffix of the left shape.
    SuffixRhs,
}

/// Matrix-product flavor: `NN` is `A*B`, `NT` is `A*B^T`.
#[derive(Debug, Clone, Copy)]
enum MatKind {
    NN,
    NT,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary {
        x: Var,
        kind: UnaryKind,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
        bcast: Broadcast,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    Matmul {
        a: Var,
        b: Var,
        kind: MatKind,
        /// (batch, m, k, n); batch == 0 encodes "rhs is unbatched rank 2 and
        /// the left operand is flattened to rows".
        dims: (usize, usize, usize, usize),
    },
    SoftmaxLast {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f32,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Per-row (mean, rstd) saved by the forward pass.
        stats: Vec<f32>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        spec: Conv3dSpec,
        /// Input (T, H, W).
        dims: (usize, usize, usize),
    },
    UpsampleCausal {
        x: Var,
        ft: usize,
        fs: usize,
    },
    GridSample {
        map: Var,
        /// Sample coordinates are data, not a differentiable input.
        coords: Tensor,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, if `v` participated.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of the loss with respect to `v`; zeros of the given shape if
    /// `v` did not participate in the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }

    /// Move the gradient for `v` out of the set.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.by_node.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Reverse-mode autodiff tape. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (parameter or data the loss is differentiated
    /// against).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Shape of a node's value.
    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // -- elementwise ------------------------------------------------------

    fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let value = self.nodes[x.0].value.map(|v| unary_forward(v, kind));
        let needs = self.needs(x);
        self.push(value, Op::Unary { x, kind }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }

    /// Natural logarithm; the caller is responsible for positive inputs.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Log)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Abs)
    }

    pub fn sqr(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sqr)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sqrt)
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        self.unary(x, UnaryKind::Clamp(lo, hi))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, UnaryKind::Scale(c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, UnaryKind::AddScalar(c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bcast = broadcast_case(&ash, &bsh).ok_or_else(|| {
            Error::Shape(format!(
                "elementwise {:?}: shapes {:?} and {:?} are not trailing-broadcast compatible",
                kind, ash, bsh
            ))
        })?;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0f32; av.len()];
        let inner = bv.len();
        match bcast {
            Broadcast::Same => {
                for i in 0..av.len() {
                    out[i] = binary_forward(av[i], bv[i], kind);
                }
            }
            Broadcast::ScalarRhs => {
                let s = bv[0];
                for i in 0..av.len() {
                    out[i] = binary_forward(av[i], s, kind);
                }
            }
            Broadcast::SuffixRhs => {
                for (orow, arow) in out.chunks_exact_mut(inner).zip(av.chunks_exact(inner)) {
                    for j in 0..inner {
                        orow[j] = binary_forward(arow[j], bv[j], kind);
                    }
                }
            }
        }
        let value = Tensor::from_vec(&ash, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Binary { a, b, kind, bcast }, needs))
    }

    /// `a + b`, broadcasting `b` over leading dimensions if needed.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    /// `a - b`, broadcasting `b` over leading dimensions if needed.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    /// `a * b` elementwise, broadcasting `b` over leading dimensions if needed.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    // -- reductions -------------------------------------------------------

    /// Sum of all elements, as a scalar (shape `[1]`).
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = kernels::sum_all_f64(self.nodes[x.0].value.data()) as f32;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    /// Mean of all elements, as a scalar (shape `[1]`).
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel().max(1);
        let s = (kernels::sum_all_f64(self.nodes[x.0].value.data()) / n as f64) as f32;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::MeanAll { x }, needs)
    }

    // -- matrix products --------------------------------------------------

    /// `A * B`. Either `B` is rank 2 `[k, n]` and `A` is rank >= 2 `[..., k]`
    /// (leading dimensions flattened to rows), or both are rank 3 with equal
    /// batch: `[bt, m, k] * [bt, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, MatKind::NN)
    }

    /// `A * B^T`. Either `B` is rank 2 `[n, k]`, or both rank 3:
    /// `[bt, m, k] * [bt, n, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, MatKind::NT)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, kind: MatKind) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        if ash.len() < 2 {
            return shape_err(format!("matmul: left operand rank {} < 2", ash.len()));
        }
        let k_a = *ash.last().unwrap();
        let (dims, out_shape) = match bsh.len() {
            2 => {
                let (k_b, n) = match kind {
                    MatKind::NN => (bsh[0], bsh[1]),
                    MatKind::NT => (bsh[1], bsh[0]),
                };
                if k_a != k_b {
                    return shape_err(format!(
                        "matmul: inner dimensions {} vs {} ({:?} x {:?})",
                        k_a, k_b, ash, bsh
                    ));
                }
                let rows: usize = ash[..ash.len() - 1].iter().product();
                let mut out_shape = ash[..ash.len() - 1].to_vec();
                out_shape.push(n);
                ((0usize, rows, k_a, n), out_shape)
            }
            3 => {
                if ash.len() != 3 || ash[0] != bsh[0] {
                    return shape_err(format!(
                        "matmul: batched operands need equal batch, got {:?} x {:?}",
                        ash, bsh
                    ));
                }
                let (k_b, n) = match kind {
                    MatKind::NN => (bsh[1], bsh[2]),
                    MatKind::NT => (bsh[2], bsh[1]),
                };
                if k_a != k_b {
                    return shape_err(format!(
                        "matmul: inner dimensions {} vs {} ({:?} x {:?})",
                        k_a, k_b, ash, bsh
                    ));
                }
                ((ash[0], ash[1], k_a, n), vec![ash[0], ash[1], n])
            }
            r => return shape_err(format!("matmul: right operand rank {} unsupported", r)),
        };
        let (bt, m, k, n) = dims;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0f32; out_shape.iter().product()];
        match (bt, kind) {
            (0, MatKind::NN) => kernels::matmul_nn(av, bv, &mut out, m, k, n),
            (0, MatKind::NT) => kernels::matmul_nt(av, bv, &mut out, m, k, n),
            (_, MatKind::NN) => kernels::bmm_nn(av, bv, &mut out, bt, m, k, n),
            (_, MatKind::NT) => kernels::bmm_nt(av, bv, &mut out, bt, m, k, n),
        }
        let value = Tensor::from_vec(&out_shape, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul { a, b, kind, dims }, needs))
    }

    // -- normalization and softmax ---------------------------------------

    /// Softmax along `axis` with per-slice max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return shape_err(format!("softmax: axis {} out of rank {}", axis, rank));
        }
        if axis == rank - 1 {
            return Ok(self.softmax_last(x));
        }
        // Rotate the axis to the end, apply, rotate back.
        let mut perm: Vec<usize> = (0..rank).filter(|&i| i != axis).collect();
        perm.push(axis);
        let mut inv = vec![0usize; rank];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let moved = self.permute(x, &perm)?;
        let soft = self.softmax_last(moved);
        self.permute(soft, &inv)
    }

    fn softmax_last(&mut self, x: Var) -> Var {
        let xt = &self.nodes[x.0].value;
        let n = *xt.shape().last().expect("softmax on rank-0 tensor");
        let mut out = vec![0.0f32; xt.numel()];
        kernels::softmax_rows(xt.data(), &mut out, n);
        let value = Tensor::from_vec(xt.shape(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::SoftmaxLast { x }, needs)
    }

    /// Fused scaled-dot-product attention for one head:
    /// `softmax(q kᵀ · scale) v` with `q [n, dh]`, `k [m, dh]`, `v [m, dv]`.
    /// Keys are summed in a canonical order (see
    /// [`kernels::attention_rows`]), so the output is bit-identical under
    /// any permutation of the key/value rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f32) -> Result<Var> {
        let (qs, ks, vs) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
            return shape_err(format!(
                "attention: q {qs:?}, k {ks:?}, v {vs:?} must all be rank 2"
            ));
        }
        if qs[1] != ks[1] {
            return shape_err(format!(
                "attention: query width {} != key width {}",
                qs[1], ks[1]
            ));
        }
        if ks[0] != vs[0] {
            return shape_err(format!(
                "attention: {} keys vs {} values",
                ks[0], vs[0]
            ));
        }
        if ks[0] == 0 {
            return Err(Error::InvalidArg(
                "attention: empty key set (callers fall back to a zero context)".into(),
            ));
        }
        let (n, m, dh, dv) = (qs[0], ks[0], ks[1], vs[1]);
        let mut out = vec![0.0f32; n * dv];
        kernels::attention_rows(
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
            scale,
            &mut out,
            n,
            m,
            dh,
            dv,
        );
        let value = Tensor::from_vec(&[n, dv], out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(value, Op::Attention { q, k, v, scale }, needs))
    }

    /// Layer normalization over the last dimension with affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let xt = &self.nodes[x.0].value;
        let d = *xt
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on rank-0 tensor".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{}]",
                self.shape(gamma),
                self.shape(beta),
                d
            ));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArg("layer_norm: eps must be positive".into()));
        }
        let rows = xt.numel() / d;
        let mut out = vec![0.0f32; xt.numel()];
        let mut stats = vec![0.0f32; rows * 2];
        kernels::layer_norm_rows(
            xt.data(),
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            eps,
            &mut out,
            &mut stats,
            d,
        );
        let value = Tensor::from_vec(self.shape(x), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            needs,
        ))
    }

    // -- convolution and sampling ----------------------------------------

    /// Temporally causal 3D convolution (see [`Conv3dSpec`] for padding and
    /// stride rules). `x` is `[T, H, W, c_in]`, `w` is
    /// `[kt, kh, kw, c_in, c_out]`, `b` is `[c_out]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, spec: Conv3dSpec) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        if xsh.len() != 4 {
            return shape_err(format!("conv3d: input rank {} != 4", xsh.len()));
        }
        let (t, h, wd, ci) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        if ci != spec.c_in {
            return shape_err(format!("conv3d: input channels {} != spec {}", ci, spec.c_in));
        }
        let wsh = [spec.kt, spec.kh, spec.kw, spec.c_in, spec.c_out];
        if self.shape(w) != wsh {
            return shape_err(format!(
                "conv3d: weight {:?} != expected {:?}",
                self.shape(w),
                wsh
            ));
        }
        if self.shape(b) != [spec.c_out] {
            return shape_err(format!(
                "conv3d: bias {:?} != [{}]",
                self.shape(b),
                spec.c_out
            ));
        }
        if spec.kh % 2 == 0 || spec.kw % 2 == 0 {
            return Err(Error::InvalidArg(
                "conv3d: spatial kernel extents must be odd for symmetric padding".into(),
            ));
        }
        let ph = (spec.kh - 1) / 2;
        let pw = (spec.kw - 1) / 2;
        if h + 2 * ph < spec.kh || wd + 2 * pw < spec.kw || t == 0 {
            return shape_err(format!(
                "conv3d: kernel {:?} larger than padded input {:?}",
                (spec.kt, spec.kh, spec.kw),
                (t, h, wd)
            ));
        }
        // Strides must divide the padded extents so shape arithmetic is exact.
        if (spec.st > 1 && (t - 1) % spec.st != 0)
            || (spec.sh > 1 && (h + 2 * ph) % spec.sh != 0)
            || (spec.sw > 1 && (wd + 2 * pw) % spec.sw != 0)
        {
            return Err(Error::InvalidArg(format!(
                "conv3d: strides {:?} do not divide padded extents of input {:?}",
                (spec.st, spec.sh, spec.sw),
                (t, h, wd)
            )));
        }
        let (to, ho, wo) = spec.out_dims(t, h, wd);
        let mut out = vec![0.0f32; to * ho * wo * spec.c_out];
        kernels::conv3d_causal(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
            spec,
            t,
            h,
            wd,
        );
        let value = Tensor::from_vec(&[to, ho, wo, spec.c_out], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            value,
            Op::Conv3d {
                x,
                w,
                b,
                spec,
                dims: (t, h, wd),
            },
            needs,
        ))
    }

    /// Nearest-neighbor upsampling by temporal factor `ft` (causal frame
    /// alignment) and spatial factor `fs`: `[T,H,W,C]` ->
    /// `[(T-1)*ft+1, H*fs, W*fs, C]`.
    pub fn upsample_causal(&mut self, x: Var, ft: usize, fs: usize) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        if xsh.len() != 4 {
            return shape_err(format!("upsample: input rank {} != 4", xsh.len()));
        }
        if ft == 0 || fs == 0 || xsh[0] == 0 {
            return Err(Error::InvalidArg("upsample: factors and T must be positive".into()));
        }
        let (t, h, w, c) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let out_shape = [(t - 1) * ft + 1, h * fs, w * fs, c];
        let mut out = vec![0.0f32; out_shape.iter().product()];
        kernels::causal_upsample(self.nodes[x.0].value.data(), &mut out, t, h, w, c, ft, fs);
        let value = Tensor::from_vec(&out_shape, out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::UpsampleCausal { x, ft, fs }, needs))
    }

    /// Bilinear sampling of a `[H, W, C]` feature map at `[P, 2]` pixel-unit
    /// coordinates (u right, v down; `(i, j)` hits texel `map[j, i]`).
    /// Out-of-bounds coordinates clamp to the border. Differentiable with
    /// respect to the map; coordinates are data.
    pub fn grid_sample(&mut self, map: Var, coords: &Tensor) -> Result<Var> {
        let msh = self.shape(map).to_vec();
        if msh.len() != 3 {
            return shape_err(format!("grid_sample: map rank {} != 3", msh.len()));
        }
        if coords.rank() != 2 || coords.shape()[1] != 2 {
            return shape_err(format!("grid_sample: coords {:?} != [P, 2]", coords.shape()));
        }
        let (h, w, c) = (msh[0], msh[1], msh[2]);
        let p = coords.shape()[0];
        let mut out = vec![0.0f32; p * c];
        kernels::bilinear_sample(self.nodes[map.0].value.data(), coords.data(), &mut out, h, w, c);
        let value = Tensor::from_vec(&[p, c], out)?;
        let needs = self.needs(map);
        Ok(self.push(
            value,
            Op::GridSample {
                map,
                coords: coords.clone(),
            },
            needs,
        ))
    }

    // -- shape plumbing ---------------------------------------------------

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat: empty part list".into()));
        }
        let base = self.shape(parts[0]).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat: axis {} out of rank {}", axis, base.len()));
        }
        let mut axis_total = 0;
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != base.len()
                || sh
                    .iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err(format!(
                    "concat: part shape {:?} incompatible with {:?} along axis {}",
                    sh, base, axis
                ));
            }
            axis_total += sh[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = kernels::axis_split(&out_shape, axis);
        let mut out = vec![0.0f32; out_shape.iter().product()];
        let mut off = 0;
        for &p in parts {
            let len = self.shape(p)[axis];
            kernels::axis_scatter(
                self.nodes[p.0].value.data(),
                &mut out,
                outer,
                len,
                axis_total,
                inner,
                off,
            );
            off += len;
        }
        let value = Tensor::from_vec(&out_shape, out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Contiguous range along `axis`: elements `[start, start + len)`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        if axis >= xsh.len() {
            return shape_err(format!("slice: axis {} out of rank {}", axis, xsh.len()));
        }
        if start + len > xsh[axis] {
            return shape_err(format!(
                "slice: range {}..{} exceeds extent {} on axis {}",
                start,
                start + len,
                xsh[axis],
                axis
            ));
        }
        let (outer, full, inner) = kernels::axis_split(&xsh, axis);
        let mut out_shape = xsh.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0f32; out_shape.iter().product()];
        kernels::axis_gather(
            self.nodes[x.0].value.data(),
            &mut out,
            outer,
            full,
            len,
            inner,
            start,
        );
        let value = Tensor::from_vec(&out_shape, out)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            needs,
        ))
    }

    /// Same elements, new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// Permute axes; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        let rank = xsh.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArg(format!(
                "permute: {:?} is not a permutation of 0..{}",
                perm, rank
            )));
        }
        // kernels::permute scatters input axis `p` to output axis `i` via
        // out[idx permuted] — its perm argument maps output axis -> input axis,
        // matching ours directly.
        let out_shape: Vec<usize> = perm.iter().map(|&p| xsh[p]).collect();
        let mut out = vec![0.0f32; self.nodes[x.0].value.numel()];
        kernels::permute(self.nodes[x.0].value.data(), &mut out, &xsh, perm);
        let value = Tensor::from_vec(&out_shape, out)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    // -- backward ---------------------------------------------------------

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// participating node; leaves that did not influence the loss have no
    /// entry (read as zeros via [`Grads::get_or_zeros`]).
    pub fn backward(&mut self, root: Var) -> Result<Grads> {
        if self.nodes[root.0].value.numel() != 1 {
            return shape_err(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {
                    grads[idx] = Some(g); // keep leaf gradients
                }
                Op::Unary { x, kind } => {
                    let xv = self.nodes[x.0].value.data();
                    let yv = self.nodes[idx].value.data();
                    let mut dx = vec![0.0f32; xv.len()];
                    for i in 0..xv.len() {
                        dx[i] = g.data()[i] * unary_backward(xv[i], yv[i], kind);
                    }
                    accum(&mut grads, x, Tensor::from_vec(self.shape(x), dx)?);
                }
                Op::Binary { a, b, kind, bcast } => {
                    self.binary_backward(&mut grads, a, b, kind, bcast, &g)?;
                }
                Op::SumAll { x } => {
                    let s = g.data()[0];
                    accum(&mut grads, x, Tensor::full(self.shape(x), s));
                }
                Op::MeanAll { x } => {
                    let n = self.nodes[x.0].value.numel().max(1);
                    let s = g.data()[0] / n as f32;
                    accum(&mut grads, x, Tensor::full(self.shape(x), s));
                }
                Op::Matmul { a, b, kind, dims } => {
                    self.matmul_backward(&mut grads, a, b, kind, dims, &g)?;
                }
                Op::SoftmaxLast { x } => {
                    let y = self.nodes[idx].value.data();
                    let n = *self.nodes[idx].value.shape().last().unwrap();
                    let mut dx = vec![0.0f32; y.len()];
                    kernels::softmax_rows_backward(y, g.data(), &mut dx, n);
                    accum(&mut grads, x, Tensor::from_vec(self.shape(x), dx)?);
                }
                Op::Attention { q, k, v, scale } => {
                    let (qv, kv, vv) = (
                        self.nodes[q.0].value.data(),
                        self.nodes[k.0].value.data(),
                        self.nodes[v.0].value.data(),
                    );
                    let (n, dh) = (self.shape(q)[0], self.shape(q)[1]);
                    let (m, dv) = (self.shape(v)[0], self.shape(v)[1]);
                    // Recompute the probabilities, then standard softmax-attention
                    // vector-Jacobian products.
                    let mut p = vec![0.0f32; n * m];
                    kernels::attention_probs(qv, kv, vv, scale, &mut p, n, m, dh, dv);
                    let mut dvgrad = vec![0.0f32; m * dv];
                    kernels::matmul_tn(&p, g.data(), &mut dvgrad, n, m, dv);
                    let mut dp = vec![0.0f32; n * m];
                    kernels::matmul_nt(g.data(), vv, &mut dp, n, dv, m);
                    let mut ds = vec![0.0f32; n * m];
                    kernels::softmax_rows_backward(&p, &dp, &mut ds, m);
                    for s in ds.iter_mut() {
                        *s *= scale;
                    }
                    let mut dq = vec![0.0f32; n * dh];
                    kernels::matmul_nn(&ds, kv, &mut dq, n, m, dh);
                    let mut dk = vec![0.0f32; m * dh];
                    kernels::matmul_tn(&ds, qv, &mut dk, n, m, dh);
                    accum(&mut grads, q, Tensor::from_vec(&[n, dh], dq)?);
                    accum(&mut grads, k, Tensor::from_vec(&[m, dh], dk)?);
                    accum(&mut grads, v, Tensor::from_vec(&[m, dv], dvgrad)?);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    ref stats,
                } => {
                    let xv = self.nodes[x.0].value.data();
                    let d = *self.nodes[x.0].value.shape().last().unwrap();
                    let mut dx = vec![0.0f32; xv.len()];
                    let mut dgamma = vec![0.0f32; d];
                    let mut dbeta = vec![0.0f32; d];
                    kernels::layer_norm_rows_backward(
                        xv,
                        self.nodes[gamma.0].value.data(),
                        stats,
                        g.data(),
                        &mut dx,
                        &mut dgamma,
                        &mut dbeta,
                        d,
                    );
                    accum(&mut grads, x, Tensor::from_vec(self.shape(x), dx)?);
                    accum(&mut grads, gamma, Tensor::from_vec(&[d], dgamma)?);
                    accum(&mut grads, beta, Tensor::from_vec(&[d], dbeta)?);
                }
                Op::Conv3d {
                    x,
                    w,
                    b,
                    spec,
                    dims,
                } => {
                    let (t, h, wd) = dims;
                    let mut dx = vec![0.0f32; self.nodes[x.0].value.numel()];
                    let mut dw = vec![0.0f32; spec.weight_len()];
                    let mut db = vec![0.0f32; spec.c_out];
                    kernels::conv3d_causal_backward(
                        self.nodes[x.0].value.data(),
                        self.nodes[w.0].value.data(),
                        g.data(),
                        &mut dx,
                        &mut dw,
                        &mut db,
                        spec,
                        t,
                        h,
                        wd,
                    );
                    accum(&mut grads, x, Tensor::from_vec(self.shape(x), dx)?);
                    accum(&mut grads, w, Tensor::from_vec(self.shape(w), dw)?);
                    accum(&mut grads, b, Tensor::from_vec(&[spec.c_out], db)?);
                }
                Op::UpsampleCausal { x, ft, fs } => {
                    let xsh = self.shape(x).to_vec();
                    let (t, h, w, c) = (xsh[0], xsh[1], xsh[2], xsh[3]);
                    let mut dx = vec![0.0f32; self.nodes[x.0].value.numel()];
                    kernels::causal_upsample_backward(g.data(), &mut dx, t, h, w, c, ft, fs);
                    accum(&mut grads, x, Tensor::from_vec(&xsh, dx)?);
                }
                Op::GridSample { map, ref coords } => {
                    let msh = self.shape(map).to_vec();
                    let (h, w, c) = (msh[0], msh[1], msh[2]);
                    let mut dmap = vec![0.0f32; self.nodes[map.0].value.numel()];
                    kernels::bilinear_sample_backward(coords.data(), g.data(), &mut dmap, h, w, c);
                    accum(&mut grads, map, Tensor::from_vec(&msh, dmap)?);
                }
                Op::Concat { ref parts, axis } => {
                    let osh = self.shape(Var(idx)).to_vec();
                    let (outer, total, inner) = kernels::axis_split(&osh, axis);
                    let mut off = 0;
                    for &p in parts {
                        let len = self.shape(p)[axis];
                        let mut dp = vec![0.0f32; self.nodes[p.0].value.numel()];
                        kernels::axis_gather(g.data(), &mut dp, outer, total, len, inner, off);
                        accum(&mut grads, p, Tensor::from_vec(self.shape(p), dp)?);
                        off += len;
                    }
                }
                Op::Slice {
                    x,
                    axis,
                    start,
                    len,
                } => {
                    let xsh = self.shape(x).to_vec();
                    let (outer, full, inner) = kernels::axis_split(&xsh, axis);
                    // Accumulate directly into the existing gradient buffer to
                    // support many slices of one tensor without quadratic cost.
                    if grads[x.0].is_none() {
                        grads[x.0] = Some(Tensor::zeros(&xsh));
                    }
                    if let Some(gx) = grads[x.0].as_mut() {
                        kernels::axis_scatter_add(
                            g.data(),
                            gx.data_mut(),
                            outer,
                            len,
                            full,
                            inner,
                            start,
                        );
                    }
                }
                Op::Reshape { x } => {
                    let back = g.reshaped(self.shape(x))?;
                    accum(&mut grads, x, back);
                }
                Op::Permute { x, ref perm } => {
                    let out_shape = self.shape(Var(idx)).to_vec();
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let mut dx = vec![0.0f32; g.numel()];
                    kernels::permute(g.data(), &mut dx, &out_shape, &inv);
                    accum(&mut grads, x, Tensor::from_vec(self.shape(x), dx)?);
                }
            }
        }
        Ok(Grads { by_node: grads })
    }

    fn binary_backward(
        &self,
        grads: &mut Vec<Option<Tensor>>,
        a: Var,
        b: Var,
        kind: BinaryKind,
        bcast: Broadcast,
        g: &Tensor,
    ) -> Result<()> {
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let gv = g.data();
        // Gradient w.r.t. the left operand (full shape).
        if self.nodes[a.0].needs_grad {
            let da = match kind {
                BinaryKind::Add | BinaryKind::Sub => g.clone(),
                BinaryKind::Mul => {
                    let mut da = vec![0.0f32; av.len()];
                    match bcast {
                        Broadcast::Same => {
                            for i in 0..av.len() {
                                da[i] = gv[i] * bv[i];
                            }
                        }
                        Broadcast::ScalarRhs => {
                            for i in 0..av.len() {
                                da[i] = gv[i] * bv[0];
                            }
                        }
                        Broadcast::SuffixRhs => {
                            let inner = bv.len();
                            for (drow, grow) in
                                da.chunks_exact_mut(inner).zip(gv.chunks_exact(inner))
                            {
                                for j in 0..inner {
                                    drow[j] = grow[j] * bv[j];
                                }
                            }
                        }
                    }
                    Tensor::from_vec(self.shape(a), da)?
                }
            };
            accum_ref(grads, a, da);
        }
        // Gradient w.r.t. the right operand (reduced over broadcast dims).
        if self.nodes[b.0].needs_grad {
            let sign = if matches!(kind, BinaryKind::Sub) { -1.0 } else { 1.0 };
            let contrib = |i: usize| -> f32 {
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => sign * gv[i],
                    BinaryKind::Mul => gv[i] * av[i],
                }
            };
            let db = match bcast {
                Broadcast::Same => {
                    let mut db = vec![0.0f32; bv.len()];
                    for (i, d) in db.iter_mut().enumerate() {
                        *d = contrib(i);
                    }
                    Tensor::from_vec(self.shape(b), db)?
                }
                Broadcast::ScalarRhs => {
                    // Deterministic two-level sum over the contribution stream.
                    let full: Vec<f32> = (0..av.len()).map(contrib).collect();
                    Tensor::from_vec(self.shape(b), vec![kernels::sum_all_f64(&full) as f32])?
                }
                Broadcast::SuffixRhs => {
                    let inner = bv.len();
                    let full: Vec<f32> = (0..av.len()).map(contrib).collect();
                    let mut db = vec![0.0f32; inner];
                    kernels::col_sums(&full, &mut db, inner);
                    Tensor::from_vec(self.shape(b), db)?
                }
            };
            accum_ref(grads, b, db);
        }
        Ok(())
    }

    fn matmul_backward(
        &self,
        grads: &mut Vec<Option<Tensor>>,
        a: Var,
        b: Var,
        kind: MatKind,
        dims: (usize, usize, usize, usize),
        g: &Tensor,
    ) -> Result<()> {
        let (bt, m, k, n) = dims;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let gv = g.data();
        if self.nodes[a.0].needs_grad {
            let mut da = vec![0.0f32; av.len()];
            match (bt, kind) {
                // dA = g * B^T -> nt(g, B); for NT: dA = g * B -> nn(g, B).
                (0, MatKind::NN) => kernels::matmul_nt(gv, bv, &mut da, m, n, k),
                (0, MatKind::NT) => kernels::matmul_nn(gv, bv, &mut da, m, n, k),
                (_, MatKind::NN) => kernels::bmm_nt(gv, bv, &mut da, bt, m, n, k),
                (_, MatKind::NT) => kernels::bmm_nn(gv, bv, &mut da, bt, m, n, k),
            }
            accum_ref(grads, a, Tensor::from_vec(self.shape(a), da)?);
        }
        if self.nodes[b.0].needs_grad {
            let mut db = vec![0.0f32; bv.len()];
            match (bt, kind) {
                // dB = A^T * g; for NT: dB = g^T * A.
                (0, MatKind::NN) => kernels::matmul_tn(av, gv, &mut db, m, k, n),
                (0, MatKind::NT) => kernels::matmul_tn(gv, av, &mut db, m, n, k),
                (_, MatKind::NN) => kernels::bmm_tn(av, gv, &mut db, bt, m, k, n),
                (_, MatKind::NT) => kernels::bmm_tn(gv, av, &mut db, bt, m, n, k),
            }
            accum_ref(grads, b, Tensor::from_vec(self.shape(b), db)?);
        }
        Ok(())
    }
}

/// Add `delta` into the gradient slot for `v`.
fn accum(grads: &mut Vec<Option<Tensor>>, v: Var, delta: Tensor) {
    accum_ref(grads, v, delta)
}

fn accum_ref(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            kernels::axpy(existing.data_mut(), 1.0, delta.data());
        }
        slot @ None => *slot = Some(delta),
    }
}

fn broadcast_case(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        Some(Broadcast::Same)
    } else if b.iter().product::<usize>() == 1 {
        Some(Broadcast::ScalarRhs)
    } else if a.len() > b.len() && a.ends_with(b) {
        Some(Broadcast::SuffixRhs)
    } else {
        None
    }
}

const GELU_COEF: f32 = 0.044_715;
const SQRT_2_OVER_PI: f32 = 0.797_884_56;

fn unary_forward(x: f32, kind: UnaryKind) -> f32 {
    match kind {
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::Gelu => {
            let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
        UnaryKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Sqr => x * x,
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Clamp(lo, hi) => x.clamp(lo, hi),
        UnaryKind::Scale(c) => c * x,
        UnaryKind::AddScalar(c) => x + c,
    }
}

/// d(out)/d(x) given input `x` and the already-computed output `y`.
fn unary_backward(x: f32, y: f32, kind: UnaryKind) -> f32 {
    match kind {
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Gelu => {
            let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
            let t = u.tanh();
            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Exp => y,
        UnaryKind::Log => 1.0 / x,
        UnaryKind::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryKind::Sqr => 2.0 * x,
        UnaryKind::Sqrt => {
            if y > 0.0 {
                0.5 / y
            } else {
                0.0
            }
        }
        UnaryKind::Clamp(lo, hi) => {
            if x > lo && x < hi {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Scale(c) => c,
        UnaryKind::AddScalar(_) => 1.0,
    }
}

fn binary_forward(a: f32, b: f32, kind: BinaryKind) -> f32 {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// Compare autodiff gradients of a scalar-valued function against central
/// finite differences, returning the worst relative error over every
/// coordinate of every input.
///
/// `build` constructs the loss from leaves created for `inputs` on a fresh
/// tape; it runs once for the analytic gradients and twice per coordinate for
/// the differences. Relative error uses an absolute floor of 1e-6 in the
/// denominator: `|g - fd| / max(1e-6, |g|, |fd|)`.
pub fn finite_diff_gradcheck<F>(build: F, inputs: &[Tensor], h: f32) -> Result<f32>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        if tape.value(loss).numel() != 1 {
            return shape_err(format!(
                "gradcheck: loss must be scalar, got {:?}",
                tape.shape(loss)
            ));
        }
        Ok(tape.value(loss).data()[0] as f64)
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return shape_err(format!(
            "gradcheck: loss must be scalar, got {:?}",
            tape.shape(loss)
        ));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();

    let mut worst = 0.0f32;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            let xp = x0 + h;
            let xm = x0 - h;
            let delta = (xp - xm) as f64;
            if delta == 0.0 {
                continue;
            }
            work[ti].data_mut()[j] = xp;
            let fp = eval(&work)?;
            work[ti].data_mut()[j] = xm;
            let fm = eval(&work)?;
            work[ti].data_mut()[j] = x0;
            let fd = ((fp - fm) / delta) as f32;
            let g = analytic[ti].data()[j];
            let rel = (g - fd).abs() / (g.abs().max(fd.abs())).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(shape: &[usize], seed: u64, scale: f32) -> Tensor {
        // Small deterministic values in [-scale/2, scale/2], kept away from 0.
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|i| {
                let v = ((i as u64 + 1).wrapping_mul(seed.wrapping_mul(2654435761) | 1) % 1000)
                    as f32
                    / 1000.0
                    - 0.5;
                let v = v * scale;
                if v.abs() < 0.05 * scale {
                    v + 0.1 * scale
                } else {
                    v
                }
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(pseudo(&[3, 4], 1, 2.0));
        let z = tape.constant(Tensor::zeros(&[3, 4]));
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.value(s), tape.value(a));
    }

    #[test]
    fn sum_of_one_to_four_is_ten() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = tape.sum_all(x);
        assert_eq!(tape.value(s).data()[0], 10.0);
    }

    #[test]
    fn one_by_one_matmul_is_scalar_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[1, 1], vec![3.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[1, 1], vec![4.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data()[0], 12.0);
    }

    #[test]
    fn identity_matmul_preserves_input() {
        let mut tape = Tape::new();
        let a = tape.leaf(pseudo(&[2, 2], 3, 1.0));
        let eye = tape.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(a).data());
    }

    #[test]
    fn affine_with_identity_weight_and_zero_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap());
        let w = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[2]));
        let xw = tape.matmul(x, w).unwrap();
        let y = tape.add(xw, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_uniform_and_dominant() {
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::zeros(&[4]));
        let su = tape.softmax(u, 0).unwrap();
        for &v in tape.value(su).data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
        let d = tape.leaf(Tensor::from_vec(&[2], vec![1000.0, 0.0]).unwrap());
        let sd = tape.softmax(d, 0).unwrap();
        assert!((tape.value(sd).data()[0] - 1.0).abs() < 1e-6);
        assert!(tape.value(sd).data()[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = pseudo(&[5, 7], 11, 4.0);
        let mut tape = Tape::new();
        let a = tape.leaf(x.clone());
        let sa = tape.softmax(a, 1).unwrap();
        let b = tape.leaf(x.map(|v| v + 3.25));
        let sb = tape.softmax(b, 1).unwrap();
        for (x, y) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_on_inner_axis_matches_transposed_last_axis() {
        let x = pseudo(&[3, 4], 7, 3.0);
        let mut tape = Tape::new();
        let a = tape.leaf(x.clone());
        let s0 = tape.softmax(a, 0).unwrap();
        // Oracle: transpose, softmax last, transpose back.
        let at = tape.permute(a, &[1, 0]).unwrap();
        let st = tape.softmax(at, 1).unwrap();
        let back = tape.permute(st, &[1, 0]).unwrap();
        assert_eq!(tape.value(s0).data(), tape.value(back).data());
    }

    #[test]
    fn fused_attention_matches_composed_softmax_matmul() {
        let q = pseudo(&[3, 4], 11, 2.0);
        let k = pseudo(&[5, 4], 12, 2.0);
        let v = pseudo(&[5, 6], 13, 2.0);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (
            tape.leaf(q.clone()),
            tape.leaf(k.clone()),
            tape.leaf(v.clone()),
        );
        let fused = tape.attention(qv, kv, vv, 0.5).unwrap();
        // Oracle: the same computation from the separate primitive ops.
        let scores = tape.matmul_nt(qv, kv).unwrap();
        let scaled = tape.scale(scores, 0.5);
        let p = tape.softmax(scaled, 1).unwrap();
        let composed = tape.matmul(p, vv).unwrap();
        assert_eq!(tape.shape(fused), &[3, 6]);
        for (a, b) in tape
            .value(fused)
            .data()
            .iter()
            .zip(tape.value(composed).data())
        {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn fused_attention_is_bit_exact_under_key_permutation() {
        let q = pseudo(&[4, 8], 21, 2.0);
        let k = pseudo(&[7, 8], 22, 2.0);
        let v = pseudo(&[7, 5], 23, 2.0);
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let permute_rows = |t: &Tensor, width: usize| {
            let mut data = Vec::with_capacity(t.numel());
            for &p in &perm {
                data.extend_from_slice(&t.data()[p * width..(p + 1) * width]);
            }
            Tensor::from_vec(t.shape(), data).unwrap()
        };
        let mut tape = Tape::new();
        let qv = tape.leaf(q.clone());
        let k1 = tape.leaf(k.clone());
        let v1 = tape.leaf(v.clone());
        let out1 = tape.attention(qv, k1, v1, 0.35).unwrap();
        let k2 = tape.leaf(permute_rows(&k, 8));
        let v2 = tape.leaf(permute_rows(&v, 5));
        let out2 = tape.attention(qv, k2, v2, 0.35).unwrap();
        assert_eq!(tape.value(out1).data(), tape.value(out2).data());
    }

    #[test]
    fn fused_attention_backward_matches_composed_ops() {
        // The composed primitives (matmul_nt -> scale -> softmax -> matmul)
        // have independently gradchecked backwards; the fused op must produce
        // the same gradients.
        let q = pseudo(&[3, 4], 31, 1.0);
        let k = pseudo(&[4, 4], 32, 1.0);
        let v = pseudo(&[4, 3], 33, 1.0);

        let mut t1 = Tape::new();
        let (q1, k1, v1) = (t1.leaf(q.clone()), t1.leaf(k.clone()), t1.leaf(v.clone()));
        let o1 = t1.attention(q1, k1, v1, 0.6).unwrap();
        let s1 = t1.sqr(o1);
        let l1 = t1.sum_all(s1);
        let g1 = t1.backward(l1).unwrap();

        let mut t2 = Tape::new();
        let (q2, k2, v2) = (t2.leaf(q), t2.leaf(k), t2.leaf(v));
        let sc = t2.matmul_nt(q2, k2).unwrap();
        let scl = t2.scale(sc, 0.6);
        let p = t2.softmax(scl, 1).unwrap();
        let o2 = t2.matmul(p, v2).unwrap();
        let s2 = t2.sqr(o2);
        let l2 = t2.sum_all(s2);
        let g2 = t2.backward(l2).unwrap();

        for (a, b) in [(q1, q2), (k1, k2), (v1, v2)] {
            for (x, y) in g1.get(a).unwrap().data().iter().zip(g2.get(b).unwrap().data()) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
                assert!(rel < 1e-5, "fused {x} vs composed {y}");
            }
        }
    }

    #[test]
    fn fused_attention_gradcheck() {
        let q = pseudo(&[3, 4], 71, 1.0);
        let k = pseudo(&[4, 4], 72, 1.0);
        let v = pseudo(&[4, 3], 73, 1.0);
        let err = finite_diff_gradcheck(
            |tape, vars| {
                let o = tape.attention(vars[0], vars[1], vars[2], 0.6)?;
                let sq = tape.sqr(o);
                Ok(tape.sum_all(sq))
            },
            &[q, k, v],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-2, "attention gradcheck err {}", err);
    }

    #[test]
    fn fused_attention_rejects_bad_shapes_and_empty_keys() {
        let mut tape = Tape::new();
        let q = tape.leaf(pseudo(&[2, 4], 41, 1.0));
        let k = tape.leaf(pseudo(&[3, 5], 42, 1.0));
        let v = tape.leaf(pseudo(&[3, 4], 43, 1.0));
        assert!(tape.attention(q, k, v, 1.0).is_err(), "width mismatch");
        let k2 = tape.leaf(pseudo(&[2, 4], 44, 1.0));
        assert!(tape.attention(q, k2, v, 1.0).is_err(), "key/value count");
        let ke = tape.leaf(Tensor::zeros(&[0, 4]));
        let ve = tape.leaf(Tensor::zeros(&[0, 4]));
        assert!(tape.attention(q, ke, ve, 1.0).is_err(), "empty key set");
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 8], 3.7));
        let gamma = tape.leaf(Tensor::full(&[8], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[8]));
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_on_already_normalized_pair() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![-1.0, 1.0]).unwrap());
        let gamma = tape.leaf(Tensor::full(&[2], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!((tape.value(y).data()[0] + 1.0).abs() < 1e-4);
        assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn pointwise_conv_is_per_voxel_affine() {
        let spec = Conv3dSpec {
            kt: 1,
            kh: 1,
            kw: 1,
            c_in: 2,
            c_out: 3,
            st: 1,
            sh: 1,
            sw: 1,
        };
        let mut tape = Tape::new();
        let x = tape.leaf(pseudo(&[2, 2, 2, 2], 5, 2.0));
        let w = tape.leaf(pseudo(&[1, 1, 1, 2, 3], 6, 1.0));
        let b = tape.leaf(pseudo(&[3], 7, 0.5));
        let y = tape.conv3d(x, w, b, spec).unwrap();
        // Oracle: flatten voxels to rows and use matmul + bias.
        let xr = tape.reshape(x, &[8, 2]).unwrap();
        let wr = tape.reshape(w, &[2, 3]).unwrap();
        let prod = tape.matmul(xr, wr).unwrap();
        let want = tape.add(prod, b).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(want).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_on_zero_input_is_broadcast_bias() {
        let spec = Conv3dSpec {
            kt: 3,
            kh: 3,
            kw: 3,
            c_in: 2,
            c_out: 4,
            st: 1,
            sh: 1,
            sw: 1,
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 4, 4, 2]));
        let w = tape.leaf(pseudo(&[3, 3, 3, 2, 4], 8, 1.0));
        let b = tape.leaf(Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap());
        let y = tape.conv3d(x, w, b, spec).unwrap();
        for row in tape.value(y).data().chunks(4) {
            assert_eq!(row, &[0.5, -1.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn conv_rejects_bad_strides_and_even_kernels() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4, 4, 4, 1]));
        let w = tape.leaf(Tensor::zeros(&[3, 3, 3, 1, 1]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        // (T-1) = 3 not divisible by stride 2.
        let bad = Conv3dSpec {
            kt: 3,
            kh: 3,
            kw: 3,
            c_in: 1,
            c_out: 1,
            st: 2,
            sh: 2,
            sw: 2,
        };
        assert!(tape.conv3d(x, w, b, bad).is_err());
        let weven = tape.leaf(Tensor::zeros(&[3, 2, 3, 1, 1]));
        let bad_k = Conv3dSpec {
            kt: 3,
            kh: 2,
            kw: 3,
            c_in: 1,
            c_out: 1,
            st: 1,
            sh: 1,
            sw: 1,
        };
        assert!(tape.conv3d(x, weven, b, bad_k).is_err());
    }

    #[test]
    fn backward_of_dot_product_is_other_vector() {
        let mut tape = Tape::new();
        let x = tape.leaf(pseudo(&[6], 9, 2.0));
        let y = tape.leaf(pseudo(&[6], 10, 2.0));
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum_all(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), tape.value(y).data());
        assert_eq!(grads.get(y).unwrap().data(), tape.value(x).data());
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(pseudo(&[4], 12, 1.0));
        let unused = tape.leaf(pseudo(&[4], 13, 1.0));
        let s = tape.sum_all(x);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(
            grads.get_or_zeros(unused, &[4]).data(),
            Tensor::zeros(&[4]).data()
        );
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(pseudo(&[4], 14, 1.0));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn bias_broadcast_gradient_is_column_sum() {
        let x = pseudo(&[5, 3], 15, 2.0);
        let b = pseudo(&[3], 16, 1.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let bv = tape.leaf(b.clone());
        let y = tape.add(xv, bv).unwrap();
        let w = tape.leaf(pseudo(&[5, 3], 17, 1.0));
        let prod = tape.mul(y, w).unwrap();
        let s = tape.sum_all(prod);
        let grads = tape.backward(s).unwrap();
        // Oracle: db[j] = sum_i w[i,j].
        let wt = tape.value(w).clone();
        for j in 0..3 {
            let want: f32 = (0..5).map(|i| wt.at(&[i, j])).sum();
            let got = grads.get(bv).unwrap().data()[j];
            assert!((want - got).abs() < 1e-5);
        }
    }

    #[test]
    fn gradcheck_linear_is_exact() {
        let x = pseudo(&[8], 20, 2.0);
        let err = finite_diff_gradcheck(
            |tape, vars| Ok(tape.sum_all(vars[0])),
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "linear gradcheck err {}", err);
    }

    #[test]
    fn gradcheck_quadratic() {
        let x = pseudo(&[8], 21, 2.0);
        let err = finite_diff_gradcheck(
            |tape, vars| {
                let q = tape.sqr(vars[0]);
                Ok(tape.sum_all(q))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "quadratic gradcheck err {}", err);
    }

    #[test]
    fn gradcheck_softmax_cross_composite() {
        let x = pseudo(&[4, 6], 22, 2.0);
        let w = pseudo(&[6, 6], 23, 1.0);
        let err = finite_diff_gradcheck(
            |tape, vars| {
                let logits = tape.matmul(vars[0], vars[1])?;
                let p = tape.softmax(logits, 1)?;
                let shifted = tape.add_scalar(p, 1e-3);
                let lg = tape.log(shifted);
                let picked = tape.mul(lg, vars[2])?;
                let s = tape.sum_all(picked);
                Ok(tape.neg(s))
            },
            &[x, w, pseudo(&[4, 6], 24, 1.0)],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-2, "softmax-cross gradcheck err {}", err);
    }

    #[test]
    fn concat_slice_round_trip_and_gradients() {
        let a = pseudo(&[2, 3], 30, 1.0);
        let b = pseudo(&[2, 2], 31, 1.0);
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let bv = tape.leaf(b.clone());
        let cat = tape.concat(&[av, bv], 1).unwrap();
        assert_eq!(tape.shape(cat), &[2, 5]);
        let back_a = tape.slice(cat, 1, 0, 3).unwrap();
        let back_b = tape.slice(cat, 1, 3, 2).unwrap();
        assert_eq!(tape.value(back_a).data(), a.data());
        assert_eq!(tape.value(back_b).data(), b.data());
        // Gradient flows through both halves with independent weights.
        let wa = tape.constant(Tensor::full(&[2, 3], 2.0));
        let wb = tape.constant(Tensor::full(&[2, 2], 3.0));
        let pa = tape.mul(back_a, wa).unwrap();
        let pb = tape.mul(back_b, wb).unwrap();
        let sa = tape.sum_all(pa);
        let sb = tape.sum_all(pb);
        let tot = tape.add(sa, sb).unwrap();
        let grads = tape.backward(tot).unwrap();
        assert!(grads.get(av).unwrap().data().iter().all(|&v| v == 2.0));
        assert!(grads.get(bv).unwrap().data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn grid_sample_matches_kernel_convention() {
        let mut tape = Tape::new();
        let map = tape.leaf(Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let coords = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        let out = tape.grid_sample(map, &coords).unwrap();
        assert!((tape.value(out).data()[0] - 2.0).abs() < 1e-6);
        assert!((tape.value(out).data()[1] - 2.5).abs() < 1e-6);
        // Empty coordinate list -> empty result.
        let empty = Tensor::zeros(&[0, 2]);
        let eout = tape.grid_sample(map, &empty).unwrap();
        assert_eq!(tape.value(eout).numel(), 0);
    }
}
