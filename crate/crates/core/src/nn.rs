//! Parameter storage, initialization, optimizer, and layer wrappers.
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical string names
//! (`"vae.enc.stem.w"`). At the start of each training step every parameter is
//! bound onto a fresh tape as a leaf ([`ParamStore::bind`]); after backward,
//! [`ParamStore::adam_step`] folds the gradients back in. Iteration order is
//! the sorted name order everywhere, so updates are deterministic.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernels::Conv3dSpec;
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with the given standard deviation.
    Normal(f32),
    /// Gaussian scaled by `1/sqrt(fan_in)`; the fan-in is inferred from the
    /// shape (product of all dimensions except the last).
    FanIn,
}

struct Param {
    value: Tensor,
    /// Adam first/second moment estimates.
    m: Tensor,
    v: Tensor,
}

/// Named parameter tensors plus Adam optimizer state.
#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    /// Adam step counter (shared across parameters).
    step: u64,
}

/// Hyperparameters for the Adam-style optimizer (defaults: lr 1e-3,
/// betas (0.9, 0.99), eps 1e-8).
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Name -> leaf mapping for one tape binding.
#[derive(Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Leaf for a bound parameter; it is a bug for a layer to ask for a name
    /// that was never registered.
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArg(format!("parameter {name} not bound")))
    }

    /// Bind an explicit name -> leaf pair. Gradient checks use this to run a
    /// layer forward against externally perturbed parameter tensors.
    pub fn insert(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter if absent; existing entries are kept (so loading
    /// a checkpoint before building a model wins over fresh init).
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) {
        if self.params.contains_key(name) {
            return;
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, rng) * std)
                .collect(),
            Init::FanIn => {
                let fan_in: usize = shape[..shape.len().saturating_sub(1)].iter().product();
                let std = 1.0 / (fan_in.max(1) as f32).sqrt();
                (0..n)
                    .map(|_| {
                        <StandardNormal as Distribution<f32>>::sample(&StandardNormal, rng) * std
                    })
                    .collect()
            }
        };
        self.params.insert(
            name.to_string(),
            Param {
                value: Tensor::from_vec(shape, data).expect("shape/data length match"),
                m: Tensor::zeros(shape),
                v: Tensor::zeros(shape),
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidArg(format!("unknown parameter {name}")))
    }

    /// Overwrite a parameter value (used by checkpoint load); resets nothing
    /// else.
    pub fn set(&mut self, name: &str, value: Tensor) {
        match self.params.get_mut(name) {
            Some(p) => {
                let shape = value.shape().to_vec();
                p.value = value;
                if p.m.shape() != shape.as_slice() {
                    p.m = Tensor::zeros(&shape);
                    p.v = Tensor::zeros(&shape);
                }
            }
            None => {
                let shape = value.shape().to_vec();
                self.params.insert(
                    name.to_string(),
                    Param {
                        value,
                        m: Tensor::zeros(&shape),
                        v: Tensor::zeros(&shape),
                    },
                );
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Bind every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut bound = Bound::default();
        for (name, p) in &self.params {
            bound.vars.insert(name.clone(), tape.leaf(p.value.clone()));
        }
        bound
    }

    /// One Adam update from the gradients of a backward pass. Parameters whose
    /// gradient is absent (not part of this loss) keep their value but still
    /// decay their moments, which leaves them unchanged when the moments are
    /// zero.
    pub fn adam_step(&mut self, bound: &Bound, grads: &mut Grads, cfg: AdamConfig) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - (cfg.beta1 as f64).powf(t);
        let bc2 = 1.0 - (cfg.beta2 as f64).powf(t);
        for (name, p) in self.params.iter_mut() {
            let Some(var) = bound.vars.get(name) else { continue };
            let grad = grads.take(*var);
            let g_slice = grad.as_ref().map(|g| g.data());
            let (m, v, val) = (p.m.data_mut(), p.v.data_mut(), p.value.data_mut());
            for i in 0..val.len() {
                let g = g_slice.map_or(0.0, |gs| gs[i]);
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                val[i] -= (cfg.lr as f64 * mhat / (vhat.sqrt() + cfg.eps as f64)) as f32;
            }
        }
    }

    /// All state as named tensors (parameters plus optimizer moments and step
    /// counter), for checkpointing.
    pub fn to_entries(&self, include_opt_state: bool) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, p) in &self.params {
            out.push((name.clone(), p.value.clone()));
            if include_opt_state {
                out.push((format!("opt.m.{name}"), p.m.clone()));
                out.push((format!("opt.v.{name}"), p.v.clone()));
            }
        }
        if include_opt_state {
            out.push(("opt.step".to_string(), Tensor::scalar(self.step as f32)));
        }
        out
    }

    /// Restore from checkpoint entries. Optimizer entries (`opt.*`) are
    /// folded back into their parameters; everything else becomes a parameter
    /// value.
    pub fn load_entries(&mut self, entries: Vec<(String, Tensor)>) {
        let mut moments: Vec<(String, Tensor)> = Vec::new();
        for (name, tensor) in entries {
            if name == "opt.step" {
                self.step = tensor.data()[0] as u64;
            } else if name.starts_with("opt.") {
                moments.push((name, tensor));
            } else {
                self.set(&name, tensor);
            }
        }
        for (name, tensor) in moments {
            if let Some(rest) = name.strip_prefix("opt.m.") {
                if let Some(p) = self.params.get_mut(rest) {
                    p.m = tensor;
                }
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                if let Some(p) = self.params.get_mut(rest) {
                    p.v = tensor;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Layer wrappers
// ---------------------------------------------------------------------------

/// Fully connected layer `y = x W + b` acting on the last dimension.
pub struct Affine {
    w: String,
    b: String,
}

impl Affine {
    /// Register parameters under `prefix` (`prefix.w`, `prefix.b`).
    /// `zero_init` makes the layer start as the zero map, used for residual
    /// branch outputs so fresh blocks are identities.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        zero_init: bool,
    ) -> Self {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        let init = if zero_init { Init::Zeros } else { Init::FanIn };
        store.register(&w, &[in_dim, out_dim], init, rng);
        store.register(&b, &[out_dim], Init::Zeros, rng);
        Affine { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let wx = tape.matmul(x, p.var(&self.w)?)?;
        tape.add(wx, p.var(&self.b)?)
    }
}

/// Fully connected layer without bias, `y = x W`. Used for attention
/// projections, where a zero weight must give an exactly zero output.
pub struct Linear {
    w: String,
}

impl Linear {
    /// Register the weight under `prefix.w`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = format!("{prefix}.w");
        store.register(&w, &[in_dim, out_dim], Init::FanIn, rng);
        Linear { w }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.matmul(x, p.var(&self.w)?)
    }

    /// Parameter name, for tests that overwrite specific weights.
    pub fn weight_name(&self) -> &str {
        &self.w
    }
}

/// Layer normalization over the last dimension with learned scale/shift.
pub struct LayerNorm {
    gamma: String,
    beta: String,
    eps: f32,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize) -> Self {
        let gamma = format!("{prefix}.g");
        let beta = format!("{prefix}.b");
        store.register(&gamma, &[dim], Init::Ones, rng);
        store.register(&beta, &[dim], Init::Zeros, rng);
        LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(&self.gamma)?, p.var(&self.beta)?, self.eps)
    }
}

/// Temporally causal 3D convolution layer.
pub struct Conv3d {
    w: String,
    b: String,
    pub spec: Conv3dSpec,
}

impl Conv3d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        spec: Conv3dSpec,
    ) -> Self {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        store.register(
            &w,
            &[spec.kt, spec.kh, spec.kw, spec.c_in, spec.c_out],
            Init::FanIn,
            rng,
        );
        store.register(&b, &[spec.c_out], Init::Zeros, rng);
        Conv3d { w, b, spec }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv3d(x, p.var(&self.w)?, p.var(&self.b)?, self.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn register_is_idempotent_and_deterministic() {
        let mut rng_a = stream(1, "init");
        let mut rng_b = stream(1, "init");
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        a.register("w", &[4, 4], Init::FanIn, &mut rng_a);
        b.register("w", &[4, 4], Init::FanIn, &mut rng_b);
        assert_eq!(a.get("w").unwrap(), b.get("w").unwrap());
        let before = a.get("w").unwrap().clone();
        a.register("w", &[4, 4], Init::FanIn, &mut rng_a);
        assert_eq!(a.get("w").unwrap(), &before);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize f(x) = sum((x - 3)^2) by gradient steps; Adam should move x
        // toward 3 monotonically in loss.
        let mut rng = stream(2, "init");
        let mut store = ParamStore::new();
        store.register("x", &[4], Init::Normal(1.0), &mut rng);
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let loss_at = |store: &ParamStore| -> f32 {
            store
                .get("x")
                .unwrap()
                .data()
                .iter()
                .map(|&v| (v - 3.0) * (v - 3.0))
                .sum()
        };
        let initial = loss_at(&store);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let x = bound.var("x").unwrap();
            let shifted = tape.add_scalar(x, -3.0);
            let sq = tape.sqr(shifted);
            let loss = tape.sum_all(sq);
            let mut grads = tape.backward(loss).unwrap();
            store.adam_step(&bound, &mut grads, cfg);
        }
        let fin = loss_at(&store);
        assert!(fin < initial * 0.01, "loss {} -> {}", initial, fin);
    }

    #[test]
    fn checkpoint_entries_round_trip_through_store() {
        let mut rng = stream(3, "init");
        let mut store = ParamStore::new();
        store.register("a.w", &[2, 3], Init::FanIn, &mut rng);
        store.register("a.b", &[3], Init::Zeros, &mut rng);
        // Take an optimizer step so moments are nonzero.
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let w = bound.var("a.w").unwrap();
        let s = tape.sum_all(w);
        let mut grads = tape.backward(s).unwrap();
        store.adam_step(&bound, &mut grads, AdamConfig::default());

        let entries = store.to_entries(true);
        let mut restored = ParamStore::new();
        restored.load_entries(entries);
        assert_eq!(restored.get("a.w").unwrap(), store.get("a.w").unwrap());
        assert_eq!(restored.step, store.step);
        assert_eq!(
            restored.params.get("a.w").unwrap().m,
            store.params.get("a.w").unwrap().m
        );
    }
}
