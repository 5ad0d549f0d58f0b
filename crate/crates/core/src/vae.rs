//! Temporally causal video VAE with joint image–video handling, the
//! sub-latent image-decoding regularizer, staged training, and the
//! last-frame-bias diagnostic.
//!
//! Layout is channels-last `[T, H, W, C]` throughout. All convolutions are
//! temporally causal, so the encoder and decoder are causal end-to-end;
//! layers running at the full frame rate use frame-local temporal kernels
//! (`kt = 1`) while temporally downsampled scales mix time with `kt = 3`.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ckpt;
use crate::error::{Error, Result};
use crate::kernels::Conv3dSpec;
use crate::metrics::append_csv_row;
use crate::nn::{AdamConfig, Bound, Conv3d, ParamStore};
use crate::rng::substream;
use crate::synth::{draw_ramp_offsets, translate_frames, VideoClip};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Clamp range for encoder log-variances.
pub const LOGVAR_MIN: f32 = -30.0;
pub const LOGVAR_MAX: f32 = 20.0;

// -- configuration -----------------------------------------------------------

/// Compression factors, capacity, and loss weights.
///
/// The perceptual and GAN weights are structural slots fixed to zero in this
/// artifact; non-zero values are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    /// Spatial downsampling factor (power of two).
    pub f_s: usize,
    /// Temporal downsampling factor (power of two).
    pub f_t: usize,
    /// Latent channels; must be divisible by `f_t` for the sub-latent split.
    pub c: usize,
    /// Channel width per downsampling stage.
    pub widths: Vec<usize>,
    /// Width of the auxiliary image decoder.
    pub aux_width: usize,
    pub lambda_l1: f32,
    pub lambda_p: f32,
    pub lambda_kl: f32,
    pub lambda_reg: f32,
    pub lambda_gan_2d: f32,
    pub lambda_gan_3d: f32,
    /// Default training window length `1 + T`.
    pub window: usize,
    /// Per-step probability of the structured-translation augmentation.
    pub aug_translate_prob: f64,
    /// Per-step probability of the frame-rate augmentation.
    pub aug_speed_prob: f64,
    /// Per-step probability of training on a single frame (joint
    /// image–video objective).
    pub image_prob: f64,
    /// Steps between periodic checkpoint writes during training.
    pub checkpoint_every: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            f_s: 4,
            f_t: 4,
            c: 8,
            widths: vec![16, 32],
            aux_width: 8,
            lambda_l1: 1.0,
            lambda_p: 0.0,
            lambda_kl: 1e-6,
            lambda_reg: 0.5,
            lambda_gan_2d: 0.0,
            lambda_gan_3d: 0.0,
            window: 17,
            aug_translate_prob: 0.3,
            aug_speed_prob: 0.3,
            image_prob: 0.1,
            checkpoint_every: 200,
        }
    }
}

impl VaeConfig {
    /// The reference large-scale factors (`f_s = 8`, `f_t = 4`, `c = 16`).
    pub fn paper() -> Self {
        VaeConfig {
            f_s: 8,
            f_t: 4,
            c: 16,
            ..VaeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.f_s.is_power_of_two() || !self.f_t.is_power_of_two() {
            return Err(Error::Config(format!(
                "f_s = {} and f_t = {} must be powers of two",
                self.f_s, self.f_t
            )));
        }
        if self.c == 0 || self.c % self.f_t != 0 {
            return Err(Error::Config(format!(
                "latent channels c = {} must be a positive multiple of f_t = {}",
                self.c, self.f_t
            )));
        }
        if self.lambda_p != 0.0 || self.lambda_gan_2d != 0.0 || self.lambda_gan_3d != 0.0 {
            return Err(Error::Config(
                "perceptual and GAN loss weights are out-of-scope slots and must stay 0".into(),
            ));
        }
        if self.widths.is_empty() || self.widths.contains(&0) || self.aux_width == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        let sp = self.f_s.trailing_zeros() as usize;
        let tp = self.f_t.trailing_zeros() as usize;
        if sp > 1 + self.widths.len() {
            return Err(Error::Config(format!(
                "f_s = {} needs more downsampling stages than {} widths provide",
                self.f_s,
                self.widths.len()
            )));
        }
        if tp > self.widths.len() {
            return Err(Error::Config(format!(
                "f_t = {} needs more downsampling stages than {} widths provide",
                self.f_t,
                self.widths.len()
            )));
        }
        if self.window == 0 || (self.window - 1) % self.f_t != 0 {
            return Err(Error::Config(format!(
                "window {} must be 1 + T with T divisible by f_t = {}",
                self.window, self.f_t
            )));
        }
        for (name, p) in [
            ("aug_translate_prob", self.aug_translate_prob),
            ("aug_speed_prob", self.aug_speed_prob),
            ("image_prob", self.image_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    fn sub_channels(&self) -> usize {
        self.c / self.f_t
    }

    /// Per-stage (temporal, spatial) strides after the stem's spatial one.
    fn stage_strides(&self) -> (usize, Vec<(usize, usize)>) {
        let mut sp = self.f_s.trailing_zeros() as usize;
        let tp = self.f_t.trailing_zeros() as usize;
        let stem_ss = if sp > 0 {
            sp -= 1;
            2
        } else {
            1
        };
        let strides = (0..self.widths.len())
            .map(|i| {
                let ss = if i < sp { 2 } else { 1 };
                let st = if i < tp { 2 } else { 1 };
                (st, ss)
            })
            .collect();
        (stem_ss, strides)
    }
}

// -- latent representation ---------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentKind {
    /// `[1+t, h, w, 2c]`: mean then log-variance along channels.
    Moments,
    /// `[1+t, h, w, c]`: sampled latents.
    Samples,
}

/// Latent video, either distribution moments or drawn samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub data: Tensor,
    pub kind: LatentKind,
}

impl LatentVideo {
    pub fn latent_frames(&self) -> usize {
        self.data.shape()[0]
    }

    /// Mean and log-variance halves of a moments latent.
    pub fn split_moments(&self) -> Result<(Tensor, Tensor)> {
        if self.kind != LatentKind::Moments {
            return Err(Error::InvalidArg("latent does not carry moments".into()));
        }
        let shape = self.data.shape();
        let (t, h, w) = (shape[0], shape[1], shape[2]);
        let c = shape[3] / 2;
        let mut mu = Tensor::zeros(&[t, h, w, c]);
        let mut lv = Tensor::zeros(&[t, h, w, c]);
        for i in 0..t * h * w {
            let src = &self.data.data()[i * 2 * c..(i + 1) * 2 * c];
            mu.data_mut()[i * c..(i + 1) * c].copy_from_slice(&src[..c]);
            lv.data_mut()[i * c..(i + 1) * c].copy_from_slice(&src[c..]);
        }
        Ok((mu, lv))
    }
}

// -- model -------------------------------------------------------------------

struct ResBlock {
    c1: Conv3d,
    c2: Conv3d,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
        prefix: &str,
        width: usize,
        kt: usize,
    ) -> Self {
        let spec = Conv3dSpec {
            kt,
            kh: 3,
            kw: 3,
            c_in: width,
            c_out: width,
            st: 1,
            sh: 1,
            sw: 1,
        };
        ResBlock {
            c1: Conv3d::new(store, rng, &format!("{prefix}.c1"), spec),
            c2: Conv3d::new(store, rng, &format!("{prefix}.c2"), spec),
        }
    }

    /// Pre-activation residual: `x + conv2(gelu(conv1(gelu(x))))`.
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.gelu(x);
        let h = self.c1.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let h = self.c2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

struct EncStage {
    res: ResBlock,
    down: Conv3d,
}

struct DecStage {
    up_t: usize,
    up_s: usize,
    conv: Conv3d,
    res: ResBlock,
}

/// The causal video VAE: encoder to moments, decoder from samples, and the
/// shared auxiliary image decoder for sub-latents.
pub struct VideoVae {
    pub cfg: VaeConfig,
    pub store: ParamStore,
    enc_stem: Conv3d,
    enc_stages: Vec<EncStage>,
    enc_final: ResBlock,
    enc_head: Conv3d,
    dec_stem: Conv3d,
    dec_res_in: ResBlock,
    /// Applied in reverse stage order (coarse to fine).
    dec_stages: Vec<DecStage>,
    stem_ss: usize,
    dec_stem_up: Option<Conv3d>,
    dec_head: Conv3d,
    aux_convs: Vec<Conv3d>,
}

fn conv_spec(kt: usize, c_in: usize, c_out: usize, st: usize, ss: usize) -> Conv3dSpec {
    Conv3dSpec {
        kt,
        kh: 3,
        kw: 3,
        c_in,
        c_out,
        st,
        sh: ss,
        sw: ss,
    }
}

impl VideoVae {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new();
        Self::build(cfg, store, seed)
    }

    /// Load parameters (and optimizer state) from a checkpoint; entries are
    /// installed before layer registration, so stored values win over
    /// fresh initialization.
    pub fn load(path: &Path, cfg: VaeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        store.load_entries(ckpt::load_entries(path)?);
        Self::build(cfg, store, 0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ckpt::save_entries(path, &self.store.to_entries(true))
    }

    fn build(cfg: VaeConfig, mut store: ParamStore, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, "vae-init", 0);
        let (stem_ss, strides) = cfg.stage_strides();
        let n = cfg.widths.len();
        let w = &cfg.widths;

        let enc_stem = Conv3d::new(
            &mut store,
            &mut rng,
            "enc.stem",
            conv_spec(1, 3, w[0], 1, stem_ss),
        );
        let mut enc_stages = Vec::with_capacity(n);
        let mut t_scale = 1usize; // temporal downsampling in effect so far
        for (i, &(st, ss)) in strides.iter().enumerate() {
            let kt = if t_scale > 1 { 3 } else { 1 };
            let res = ResBlock::new(&mut store, &mut rng, &format!("enc.res{i}"), w[i], kt);
            let next = w[(i + 1).min(n - 1)];
            let down = Conv3d::new(
                &mut store,
                &mut rng,
                &format!("enc.down{i}"),
                conv_spec(3, w[i], next, st, ss),
            );
            enc_stages.push(EncStage { res, down });
            t_scale *= st;
        }
        let enc_final = ResBlock::new(&mut store, &mut rng, "enc.res_final", w[n - 1], 3);
        let enc_head = Conv3d::new(
            &mut store,
            &mut rng,
            "enc.head",
            conv_spec(3, w[n - 1], 2 * cfg.c, 1, 1),
        );

        let dec_stem = Conv3d::new(
            &mut store,
            &mut rng,
            "dec.stem",
            conv_spec(3, cfg.c, w[n - 1], 1, 1),
        );
        let dec_res_in = ResBlock::new(&mut store, &mut rng, "dec.res_in", w[n - 1], 3);
        let mut dec_stages = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let (st, ss) = strides[i];
            // Temporal scale on this stage's output side.
            let t_scale_out: usize = strides[..i].iter().map(|&(s, _)| s).product();
            let kt = if t_scale_out > 1 { 3 } else { 1 };
            let from = w[(i + 1).min(n - 1)];
            let conv = Conv3d::new(
                &mut store,
                &mut rng,
                &format!("dec.up{i}"),
                conv_spec(kt, from, w[i], 1, 1),
            );
            let res = ResBlock::new(&mut store, &mut rng, &format!("dec.res{i}"), w[i], kt);
            dec_stages.push(DecStage { up_t: st, up_s: ss, conv, res });
        }
        let dec_stem_up = (stem_ss == 2).then(|| {
            Conv3d::new(
                &mut store,
                &mut rng,
                "dec.stem_up",
                conv_spec(1, w[0], w[0], 1, 1),
            )
        });
        let dec_head = Conv3d::new(&mut store, &mut rng, "dec.head", conv_spec(1, w[0], 3, 1, 1));

        let sp_steps = cfg.f_s.trailing_zeros() as usize;
        let mut aux_convs = Vec::with_capacity(sp_steps + 1);
        for i in 0..=sp_steps {
            let c_in = if i == 0 { cfg.sub_channels() } else { cfg.aux_width };
            let c_out = if i == sp_steps { 3 } else { cfg.aux_width };
            aux_convs.push(Conv3d::new(
                &mut store,
                &mut rng,
                &format!("aux.c{i}"),
                conv_spec(1, c_in, c_out, 1, 1),
            ));
        }

        Ok(VideoVae {
            cfg,
            store,
            enc_stem,
            enc_stages,
            enc_final,
            enc_head,
            dec_stem,
            dec_res_in,
            dec_stages,
            stem_ss,
            dec_stem_up,
            dec_head,
            aux_convs,
        })
    }

    /// Encoder forward on the tape: `[1+T, H, W, 3]` window to clamped
    /// moments `[1+t, h, w, 2c]`.
    pub fn encode_t(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != 3 {
            return Err(Error::Shape(format!(
                "encoder input must be [1+T, H, W, 3], got {shape:?}"
            )));
        }
        let (frames, h, w) = (shape[0], shape[1], shape[2]);
        let pad_t = (self.cfg.f_t - (frames - 1) % self.cfg.f_t) % self.cfg.f_t;
        if pad_t != 0 {
            return Err(Error::Shape(format!(
                "clip length {frames} is not 1 + T with T divisible by f_t = {}; \
                 pad with {pad_t} more frame(s)",
                self.cfg.f_t
            )));
        }
        for (name, extent) in [("height", h), ("width", w)] {
            let pad = (self.cfg.f_s - extent % self.cfg.f_s) % self.cfg.f_s;
            if pad != 0 {
                return Err(Error::Shape(format!(
                    "{name} {extent} is not divisible by f_s = {}; pad by {pad} pixel(s)",
                    self.cfg.f_s
                )));
            }
        }
        let mut h = self.enc_stem.forward(tape, p, x)?;
        for stage in &self.enc_stages {
            h = stage.res.forward(tape, p, h)?;
            h = stage.down.forward(tape, p, h)?;
        }
        h = self.enc_final.forward(tape, p, h)?;
        let moments = self.enc_head.forward(tape, p, h)?;
        // Clamp only the log-variance half of the channels.
        let mu = tape.slice(moments, 3, 0, self.cfg.c)?;
        let lv = tape.slice(moments, 3, self.cfg.c, self.cfg.c)?;
        let lv = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        tape.concat(&[mu, lv], 3)
    }

    /// Decoder forward on the tape: samples `[1+t, h, w, c]` to an
    /// unclamped `[1+t·f_t, h·f_s, w·f_s, 3]` reconstruction.
    pub fn decode_t(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 4 || shape[3] != self.cfg.c {
            return Err(Error::Shape(format!(
                "decoder input must be [1+t, h, w, {}], got {shape:?}",
                self.cfg.c
            )));
        }
        let mut h = self.dec_stem.forward(tape, p, z)?;
        h = self.dec_res_in.forward(tape, p, h)?;
        for stage in &self.dec_stages {
            if stage.up_t > 1 || stage.up_s > 1 {
                h = tape.upsample_causal(h, stage.up_t, stage.up_s)?;
            }
            h = stage.conv.forward(tape, p, h)?;
            h = stage.res.forward(tape, p, h)?;
        }
        if let Some(stem_up) = &self.dec_stem_up {
            h = tape.upsample_causal(h, 1, self.stem_ss)?;
            h = stem_up.forward(tape, p, h)?;
            h = tape.gelu(h);
        }
        self.dec_head.forward(tape, p, h)
    }

    /// Auxiliary image decoder on the tape: sub-latent frames
    /// `[N, h, w, c/f_t]` to unclamped `[N, H, W, 3]` frames. Frames are
    /// decoded independently (all kernels are frame-local).
    pub fn aux_decode_t(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.cfg.sub_channels() {
            return Err(Error::Shape(format!(
                "aux decoder input must be [N, h, w, {}], got {shape:?}",
                self.cfg.sub_channels()
            )));
        }
        let mut h = x;
        for (i, conv) in self.aux_convs.iter().enumerate() {
            if i > 0 {
                h = tape.gelu(h);
                h = tape.upsample_causal(h, 1, 2)?;
            }
            h = conv.forward(tape, p, h)?;
        }
        Ok(h)
    }
}

// -- public operations -------------------------------------------------------

/// Encode a window tensor `[1+T, H, W, 3]` into latent moments.
pub fn encode_window(model: &VideoVae, window: &Tensor) -> Result<LatentVideo> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let x = tape.constant(window.clone());
    let moments = model.encode_t(&mut tape, &p, x)?;
    Ok(LatentVideo {
        data: tape.value(moments).clone(),
        kind: LatentKind::Moments,
    })
}

/// Encode a whole clip into latent moments.
pub fn vae_encode(model: &VideoVae, clip: &VideoClip) -> Result<LatentVideo> {
    encode_window(model, clip.frames())
}

/// Draw samples `z = mu + exp(logvar / 2) * eps` with `eps ~ N(0, 1)` from
/// the seed.
pub fn vae_reparameterize(moments: &LatentVideo, seed: u64) -> Result<LatentVideo> {
    let (mu, lv) = moments.split_moments()?;
    let mut rng = substream(seed, "vae-reparam", 0);
    let mut data = Vec::with_capacity(mu.numel());
    for (m, l) in mu.data().iter().zip(lv.data()) {
        let eps: f32 = StandardNormal.sample(&mut rng);
        data.push(m + (0.5 * l).exp() * eps);
    }
    Ok(LatentVideo {
        data: Tensor::from_vec(mu.shape(), data)?,
        kind: LatentKind::Samples,
    })
}

/// Decode latent samples to a clip; output clamped to [0, 1].
pub fn vae_decode(model: &VideoVae, latent: &LatentVideo) -> Result<VideoClip> {
    if latent.kind != LatentKind::Samples {
        return Err(Error::InvalidArg(
            "vae_decode expects sampled latents, not moments".into(),
        ));
    }
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let z = tape.constant(latent.data.clone());
    let recon = model.decode_t(&mut tape, &p, z)?;
    VideoClip::new(tape.value(recon).clone())
}

/// Split one latent frame `[h, w, c]` into `f_t` sub-latents of `c / f_t`
/// channels each.
pub fn split_sublatents(frame: &Tensor, f_t: usize) -> Result<Vec<Tensor>> {
    if frame.rank() != 3 {
        return Err(Error::Shape(format!(
            "latent frame must be [h, w, c], got {:?}",
            frame.shape()
        )));
    }
    let (h, w, c) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    if f_t == 0 || c % f_t != 0 {
        return Err(Error::InvalidArg(format!(
            "cannot split {c} channels into {f_t} sub-latents"
        )));
    }
    let cs = c / f_t;
    let mut out = vec![Tensor::zeros(&[h, w, cs]); f_t];
    for i in 0..h * w {
        let src = &frame.data()[i * c..(i + 1) * c];
        for (k, sub) in out.iter_mut().enumerate() {
            sub.data_mut()[i * cs..(i + 1) * cs].copy_from_slice(&src[k * cs..(k + 1) * cs]);
        }
    }
    Ok(out)
}

/// Decode one latent frame's `f_t` sub-latents into `f_t` reconstructed
/// frames `[H, W, 3]`, clamped to [0, 1].
pub fn aux_image_decode(model: &VideoVae, latent_frame: &Tensor) -> Result<Vec<Tensor>> {
    let subs = split_sublatents(latent_frame, model.cfg.f_t)?;
    let (h, w, cs) = (
        latent_frame.shape()[0],
        latent_frame.shape()[1],
        model.cfg.sub_channels(),
    );
    let mut stacked = Vec::with_capacity(model.cfg.f_t * h * w * cs);
    for sub in &subs {
        stacked.extend_from_slice(sub.data());
    }
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let x = tape.constant(Tensor::from_vec(&[model.cfg.f_t, h, w, cs], stacked)?);
    let out = model.aux_decode_t(&mut tape, &p, x)?;
    let out = tape.value(out);
    let (oh, ow) = (out.shape()[1], out.shape()[2]);
    let stride = oh * ow * 3;
    Ok((0..model.cfg.f_t)
        .map(|k| {
            Tensor::from_vec(
                &[oh, ow, 3],
                out.data()[k * stride..(k + 1) * stride]
                    .iter()
                    .map(|v| v.clamp(0.0, 1.0))
                    .collect(),
            )
            .expect("aux frame slice has matching extent")
        })
        .collect())
}

/// Per-term loss values. `l1`, `kl`, and `reg` are unweighted means; `total`
/// applies the configured weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub kl: f64,
    pub reg: f64,
    pub total: f64,
}

fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    const CHUNK: usize = 1024;
    let mut total = 0.0f64;
    for (ca, cb) in a.chunks(CHUNK).zip(b.chunks(CHUNK)) {
        let mut part = 0.0f64;
        for (x, y) in ca.iter().zip(cb) {
            part += ((x - y) as f64).abs();
        }
        total += part;
    }
    total / a.len() as f64
}

/// Reconstruction + KL + image-decoding regularization:
/// `lambda_L1 * mean|x - recon| + lambda_KL * mean(KL per element) +
/// lambda_reg * mean|x_tail - aux|`, where `x_tail` is the window minus its
/// first frame. The perceptual and GAN slots contribute zero.
pub fn vae_loss(
    window: &Tensor,
    recon: &Tensor,
    moments: &LatentVideo,
    aux_frames: Option<&Tensor>,
    cfg: &VaeConfig,
) -> Result<LossBreakdown> {
    if window.shape() != recon.shape() {
        return Err(Error::Shape(format!(
            "loss: window {:?} vs reconstruction {:?}",
            window.shape(),
            recon.shape()
        )));
    }
    let l1 = mean_abs_diff(window.data(), recon.data());
    let (mu, lv) = moments.split_moments()?;
    let mut kl = 0.0f64;
    for (m, l) in mu.data().iter().zip(lv.data()) {
        let (m, l) = (*m as f64, *l as f64);
        kl += 0.5 * (m * m + l.exp() - 1.0 - l);
    }
    kl /= mu.numel() as f64;
    let reg = match aux_frames {
        Some(aux) => {
            let frames = window.shape()[0];
            let tail_len = aux.shape()[0];
            if tail_len != frames - 1 || aux.shape()[1..] != window.shape()[1..] {
                return Err(Error::Shape(format!(
                    "loss: aux frames {:?} do not match window tail {:?}",
                    aux.shape(),
                    window.shape()
                )));
            }
            let stride: usize = window.shape()[1..].iter().product();
            mean_abs_diff(&window.data()[stride..], aux.data())
        }
        None => 0.0,
    };
    let total = cfg.lambda_l1 as f64 * l1 + cfg.lambda_kl as f64 * kl + cfg.lambda_reg as f64 * reg;
    Ok(LossBreakdown { l1, kl, reg, total })
}

// -- training ----------------------------------------------------------------

/// One training stage: window length, step count, learning rate.
#[derive(Debug, Clone, Copy)]
pub struct TrainStage {
    pub window: usize,
    pub steps: usize,
    pub lr: f32,
}

/// One logged training step (unweighted terms plus the weighted total).
#[derive(Debug, Clone, Copy)]
pub struct TrainRecord {
    pub step: usize,
    pub l1: f64,
    pub kl: f64,
    pub reg: f64,
    pub total: f64,
}

pub const VAE_LOSS_HEADER: &str = "step,l1,kl,reg,total";

/// Assemble a `[len, H, W, 3]` window from clip frames at `indices`.
fn gather_window(clip: &VideoClip, indices: &[usize]) -> Tensor {
    let (h, w) = (clip.height(), clip.width());
    let stride = h * w * 3;
    let mut data = Vec::with_capacity(indices.len() * stride);
    for &i in indices {
        data.extend_from_slice(&clip.frames().data()[i * stride..(i + 1) * stride]);
    }
    Tensor::from_vec(&[indices.len(), h, w, 3], data).expect("window extent matches")
}

/// Pick window frame indices for one step, applying the frame-rate
/// augmentation when drawn and the clip is long enough.
fn sample_indices(
    rng: &mut rand_chacha::ChaCha8Rng,
    clip_len: usize,
    window: usize,
    speed_prob: f64,
) -> Vec<usize> {
    let stride = if window > 1 && rng.gen::<f64>() < speed_prob {
        // Half speed duplicates frames; 2 and 3 subsample.
        match rng.gen_range(0..3u32) {
            0 => 0, // sentinel for half speed
            1 => 2,
            _ => 3,
        }
    } else {
        1
    };
    let span = match stride {
        0 => window.div_ceil(2),
        s => (window - 1) * s + 1,
    };
    if span > clip_len {
        // Clip too short for this rate: fall back to the plain window.
        let start = rng.gen_range(0..=clip_len.saturating_sub(window));
        return (start..start + window).collect();
    }
    let start = rng.gen_range(0..=clip_len - span);
    match stride {
        0 => (0..window).map(|k| start + k / 2).collect(),
        s => (0..window).map(|k| start + k * s).collect(),
    }
}

/// Staged VAE training. Writes `vae_stage{i}.ckpt` per stage (at stage start
/// and every `checkpoint_every` steps, so the last good checkpoint survives
/// an abort) and appends to `vae_loss.csv`. A non-finite loss aborts with an
/// error; the most recent checkpoint on disk remains valid.
pub fn train_vae(
    model: &mut VideoVae,
    dataset: &[VideoClip],
    stages: &[TrainStage],
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<TrainRecord>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArg("VAE training needs a non-empty dataset".into()));
    }
    for stage in stages {
        if stage.window == 0 || (stage.window - 1) % model.cfg.f_t != 0 {
            return Err(Error::Config(format!(
                "stage window {} must be 1 + T with T divisible by f_t = {}",
                stage.window, model.cfg.f_t
            )));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let csv = out_dir.join("vae_loss.csv");
    let mut history = Vec::new();
    let mut global_step = 0usize;

    for (stage_idx, stage) in stages.iter().enumerate() {
        let ckpt_path = out_dir.join(format!("vae_stage{stage_idx}.ckpt"));
        model.save(&ckpt_path)?;
        for _ in 0..stage.steps {
            let mut rng = substream(seed, "vae-train", global_step as u64);
            let clip = &dataset[rng.gen_range(0..dataset.len())];
            let window_len = if rng.gen::<f64>() < model.cfg.image_prob {
                1
            } else {
                stage.window
            };
            if clip.frame_count() < window_len {
                return Err(Error::InvalidArg(format!(
                    "clip with {} frames is shorter than the {window_len}-frame window",
                    clip.frame_count()
                )));
            }
            let indices = sample_indices(
                &mut rng,
                clip.frame_count(),
                window_len,
                model.cfg.aug_speed_prob,
            );
            let mut window = gather_window(clip, &indices);
            if window_len > 1 && rng.gen::<f64>() < model.cfg.aug_translate_prob {
                let offsets = draw_ramp_offsets(&mut rng, window_len, clip.width() / 4);
                window = translate_frames(&window, &offsets)?;
            }

            let record = train_step(model, &window, stage.lr, seed, global_step)?;
            append_csv_row(
                &csv,
                VAE_LOSS_HEADER,
                &format!(
                    "{},{},{},{},{}",
                    record.step, record.l1, record.kl, record.reg, record.total
                ),
            )?;
            history.push(record);
            global_step += 1;
            if model.cfg.checkpoint_every > 0 && global_step % model.cfg.checkpoint_every == 0 {
                model.save(&ckpt_path)?;
            }
        }
        model.save(&ckpt_path)?;
    }
    Ok(history)
}

/// One optimization step on a single window; returns the logged terms.
fn train_step(
    model: &mut VideoVae,
    window: &Tensor,
    lr: f32,
    seed: u64,
    step: usize,
) -> Result<TrainRecord> {
    let cfg = model.cfg.clone();
    let c = cfg.c;
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let x = tape.constant(window.clone());

    let moments = model.encode_t(&mut tape, &p, x)?;
    let mu = tape.slice(moments, 3, 0, c)?;
    let lv = tape.slice(moments, 3, c, c)?;
    let mshape = tape.shape(mu).to_vec();
    let eps = {
        let mut rng = substream(seed, "vae-train-eps", step as u64);
        let data: Vec<f32> = (0..mshape.iter().product::<usize>())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        tape.constant(Tensor::from_vec(&mshape, data)?)
    };
    let half_lv = tape.scale(lv, 0.5);
    let std = tape.exp(half_lv);
    let noise = tape.mul(std, eps)?;
    let z = tape.add(mu, noise)?;

    let recon = model.decode_t(&mut tape, &p, z)?;
    let diff = tape.sub(x, recon)?;
    let absdiff = tape.abs(diff);
    let l1 = tape.mean_all(absdiff);

    // KL per element: 0.5 (mu^2 + exp(lv) - 1 - lv).
    let mu2 = tape.sqr(mu);
    let var = tape.exp(lv);
    let sum = tape.add(mu2, var)?;
    let sum = tape.add_scalar(sum, -1.0);
    let sum = tape.sub(sum, lv)?;
    let kl_mean = tape.mean_all(sum);
    let kl = tape.scale(kl_mean, 0.5);

    let t1 = tape.shape(moments)[0];
    let frames = window.shape()[0];
    let reg = if cfg.lambda_reg != 0.0 && t1 > 1 {
        let (h, w) = (tape.shape(moments)[1], tape.shape(moments)[2]);
        let cs = cfg.sub_channels();
        let z_tail = tape.slice(z, 0, 1, t1 - 1)?;
        let grouped = tape.reshape(z_tail, &[t1 - 1, h, w, cfg.f_t, cs])?;
        let ordered = tape.permute(grouped, &[0, 3, 1, 2, 4])?;
        let stacked = tape.reshape(ordered, &[(t1 - 1) * cfg.f_t, h, w, cs])?;
        let aux = model.aux_decode_t(&mut tape, &p, stacked)?;
        let target = tape.slice(x, 0, 1, frames - 1)?;
        let adiff = tape.sub(target, aux)?;
        let aabs = tape.abs(adiff);
        tape.mean_all(aabs)
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    let wl1 = tape.scale(l1, cfg.lambda_l1);
    let wkl = tape.scale(kl, cfg.lambda_kl);
    let wreg = tape.scale(reg, cfg.lambda_reg);
    let partial = tape.add(wl1, wkl)?;
    let total = tape.add(partial, wreg)?;

    let total_value = tape.value(total).data()[0] as f64;
    if !total_value.is_finite() {
        return Err(Error::InvalidArg(format!(
            "non-finite loss {total_value} at step {step}; aborting with the last checkpoint retained"
        )));
    }
    let record = TrainRecord {
        step,
        l1: tape.value(l1).data()[0] as f64,
        kl: tape.value(kl).data()[0] as f64,
        reg: tape.value(reg).data()[0] as f64,
        total: total_value,
    };

    let mut grads = tape.backward(total)?;
    model.store.adam_step(&p, &mut grads, AdamConfig { lr, ..AdamConfig::default() });
    Ok(record)
}

// -- diagnostics -------------------------------------------------------------

/// Per-clip temporal-mean baseline: every frame replaced by the clip's mean
/// frame. The quality floor that a trained model must beat.
pub fn temporal_mean_baseline(window: &Tensor) -> Result<Tensor> {
    if window.rank() != 4 {
        return Err(Error::Shape("baseline expects [F, H, W, C]".into()));
    }
    let f = window.shape()[0];
    let stride: usize = window.shape()[1..].iter().product();
    let mut mean = vec![0.0f64; stride];
    for k in 0..f {
        for (m, v) in mean.iter_mut().zip(&window.data()[k * stride..(k + 1) * stride]) {
            *m += *v as f64;
        }
    }
    let mut data = Vec::with_capacity(f * stride);
    let frame: Vec<f32> = mean.iter().map(|m| (*m / f as f64) as f32).collect();
    for _ in 0..f {
        data.extend_from_slice(&frame);
    }
    Tensor::from_vec(window.shape(), data)
}

/// Bias score from a per-position PSNR profile: last position minus the mean
/// of the others.
pub fn bias_from_profile(profile: &[f64]) -> f64 {
    let n = profile.len();
    if n < 2 {
        return 0.0;
    }
    let others: f64 = profile[..n - 1].iter().sum::<f64>() / (n - 1) as f64;
    profile[n - 1] - others
}

/// Reconstruction PSNR per frame position within each temporal window of
/// `f_t` frames, aggregated over the dataset (leading frames use the first
/// `window` frames of each clip; decoding uses the latent means). Returns
/// the profile (length `f_t`) and the bias score.
pub fn last_frame_bias_diagnostic(
    model: &VideoVae,
    dataset: &[VideoClip],
    window: usize,
) -> Result<(Vec<f64>, f64)> {
    let f_t = model.cfg.f_t;
    let mut sq = vec![0.0f64; f_t];
    let mut count = vec![0usize; f_t];
    let mut used = 0usize;
    for clip in dataset {
        if clip.frame_count() < window {
            continue;
        }
        used += 1;
        let win = gather_window(clip, &(0..window).collect::<Vec<_>>());
        let moments = encode_window(model, &win)?;
        let (mu, _) = moments.split_moments()?;
        let latent = LatentVideo { data: mu, kind: LatentKind::Samples };
        let recon = vae_decode(model, &latent)?;
        let stride: usize = win.shape()[1..].iter().product();
        for k in 1..window {
            let pos = (k - 1) % f_t;
            let a = &win.data()[k * stride..(k + 1) * stride];
            let b = &recon.frames().data()[k * stride..(k + 1) * stride];
            for (x, y) in a.iter().zip(b) {
                let d = (*x - *y) as f64;
                sq[pos] += d * d;
            }
            count[pos] += stride;
        }
    }
    if used == 0 {
        return Err(Error::InvalidArg(
            "no clip is long enough for the diagnostic window".into(),
        ));
    }
    let profile: Vec<f64> = sq
        .iter()
        .zip(&count)
        .map(|(s, n)| {
            let mse = s / (*n).max(1) as f64;
            if mse <= 0.0 {
                crate::metrics::PSNR_CAP
            } else {
                (10.0 * (1.0 / mse).log10()).min(crate::metrics::PSNR_CAP)
            }
        })
        .collect();
    let bias = bias_from_profile(&profile);
    Ok((profile, bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::moving_square_clips;

    fn tiny_cfg() -> VaeConfig {
        VaeConfig {
            c: 4,
            widths: vec![4, 6],
            aux_width: 4,
            window: 5,
            ..VaeConfig::default()
        }
    }

    fn window_of(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = substream(seed, "vae-test-window", 0);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn config_validation_rejects_bad_factors() {
        let mut cfg = VaeConfig::default();
        cfg.f_s = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = VaeConfig::default();
        cfg.c = 6; // not divisible by f_t = 4
        assert!(cfg.validate().is_err());

        let mut cfg = VaeConfig::default();
        cfg.lambda_gan_2d = 0.1;
        assert!(cfg.validate().is_err());

        let mut cfg = VaeConfig::default();
        cfg.window = 16; // 15 % 4 != 0
        assert!(cfg.validate().is_err());

        assert!(VaeConfig::default().validate().is_ok());
        assert!(VaeConfig::paper().validate().is_ok());
    }

    #[test]
    fn encode_shape_contract_and_single_image() {
        let model = VideoVae::new(tiny_cfg(), 1).unwrap();
        let moments = encode_window(&model, &window_of(&[5, 16, 16, 3], 2)).unwrap();
        assert_eq!(moments.data.shape(), &[2, 4, 4, 8]);
        assert_eq!(moments.kind, LatentKind::Moments);

        // A single image maps to a single latent frame.
        let moments = encode_window(&model, &window_of(&[1, 16, 16, 3], 3)).unwrap();
        assert_eq!(moments.data.shape(), &[1, 4, 4, 8]);
    }

    #[test]
    fn reference_factors_give_reference_shapes() {
        // f_s = 8, f_t = 4, c = 16 at slim widths: 33 frames -> 9 latent
        // frames, 64x64 -> 8x8.
        let cfg = VaeConfig {
            widths: vec![3, 4],
            aux_width: 3,
            window: 33,
            ..VaeConfig::paper()
        };
        let model = VideoVae::new(cfg, 1).unwrap();
        let moments = encode_window(&model, &window_of(&[33, 64, 64, 3], 4)).unwrap();
        assert_eq!(moments.data.shape(), &[9, 8, 8, 32]);
    }

    #[test]
    fn encode_rejects_bad_extents_with_padding_hint() {
        let model = VideoVae::new(tiny_cfg(), 1).unwrap();
        let err = encode_window(&model, &window_of(&[3, 16, 16, 3], 2)).unwrap_err();
        assert!(err.to_string().contains("2 more frame"), "{err}");
        let err = encode_window(&model, &window_of(&[5, 15, 16, 3], 2)).unwrap_err();
        assert!(err.to_string().contains("1 pixel"), "{err}");
    }

    #[test]
    fn encoder_is_temporally_causal() {
        let model = VideoVae::new(tiny_cfg(), 7).unwrap();
        let base = window_of(&[9, 16, 16, 3], 5);
        let a = encode_window(&model, &base).unwrap();
        // Perturb frames 5.. (covered by latent frames 2 and 3 only).
        let mut perturbed = base.clone();
        let stride = 16 * 16 * 3;
        for v in &mut perturbed.data_mut()[5 * stride..] {
            *v = 1.0 - *v;
        }
        let b = encode_window(&model, &perturbed).unwrap();
        // Latent frame 1 covers input frames 1..=4; latent 0 covers frame 0.
        let lstride = 4 * 4 * 8;
        assert_eq!(
            &a.data.data()[..2 * lstride],
            &b.data.data()[..2 * lstride],
            "latents over unperturbed frames must be bit-identical"
        );
        assert_ne!(&a.data.data()[2 * lstride..], &b.data.data()[2 * lstride..]);
    }

    #[test]
    fn reparameterize_is_seeded_and_tracks_moments() {
        // Per-pixel channel layout: first c channels mean, last c log-variance.
        let mut data = Vec::new();
        for pix in 0..4 {
            for ch in 0..4 {
                data.push((pix * 4 + ch) as f32 * 0.1);
            }
            data.extend([-60.0f32; 4]); // near-zero variance
        }
        let moments = LatentVideo {
            data: Tensor::from_vec(&[1, 2, 2, 8], data).unwrap(),
            kind: LatentKind::Moments,
        };
        let a = vae_reparameterize(&moments, 3).unwrap();
        let b = vae_reparameterize(&moments, 3).unwrap();
        assert_eq!(a.data.data(), b.data.data());
        assert_eq!(a.kind, LatentKind::Samples);
        for (i, z) in a.data.data().iter().enumerate() {
            let m = i as f32 * 0.1;
            assert!((z - m).abs() < 1e-6, "z {z} vs mu {m}");
        }
    }

    #[test]
    fn reparameterize_matches_standard_normal_statistics() {
        let n = 10_000;
        let moments = LatentVideo {
            data: Tensor::zeros(&[1, n, 1, 2]),
            kind: LatentKind::Moments,
        };
        let z = vae_reparameterize(&moments, 11).unwrap();
        let mean: f64 = z.data.data().iter().map(|v| *v as f64).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "empirical mean {mean}");
    }

    #[test]
    fn decode_shape_contract_and_determinism() {
        let model = VideoVae::new(tiny_cfg(), 1).unwrap();
        let latent = LatentVideo {
            data: Tensor::zeros(&[2, 4, 4, 4]),
            kind: LatentKind::Samples,
        };
        let a = vae_decode(&model, &latent).unwrap();
        assert_eq!(a.frames().shape(), &[5, 16, 16, 3]);
        let b = vae_decode(&model, &latent).unwrap();
        assert_eq!(a.frames().data(), b.frames().data());
        for v in a.frames().data() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn decoder_is_temporally_causal() {
        let model = VideoVae::new(tiny_cfg(), 9).unwrap();
        let mut rng = substream(1, "dec-causal", 0);
        let base = Tensor::from_vec(
            &[3, 4, 4, 4],
            (0..3 * 4 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0f32)).collect(),
        )
        .unwrap();
        let a = vae_decode(&model, &LatentVideo { data: base.clone(), kind: LatentKind::Samples })
            .unwrap();
        // Perturb latent frame 2: decoded frames < 1 + f_t*(2-1) = 5 keep.
        let mut p = base.clone();
        let lstride = 4 * 4 * 4;
        for v in &mut p.data_mut()[2 * lstride..] {
            *v += 1.0;
        }
        let b = vae_decode(&model, &LatentVideo { data: p, kind: LatentKind::Samples }).unwrap();
        let fstride = 16 * 16 * 3;
        assert_eq!(
            &a.frames().data()[..5 * fstride],
            &b.frames().data()[..5 * fstride]
        );
        assert_ne!(
            &a.frames().data()[5 * fstride..],
            &b.frames().data()[5 * fstride..]
        );
    }

    #[test]
    fn sublatent_split_is_partition_and_aux_decodes_independently() {
        let cfg = VaeConfig {
            c: 16,
            widths: vec![4, 6],
            aux_width: 4,
            ..VaeConfig::default()
        };
        let model = VideoVae::new(cfg, 3).unwrap();
        let mut rng = substream(2, "aux-test", 0);
        let frame = Tensor::from_vec(
            &[4, 4, 16],
            (0..4 * 4 * 16).map(|_| rng.gen_range(-1.0..1.0f32)).collect(),
        )
        .unwrap();
        let subs = split_sublatents(&frame, 4).unwrap();
        assert_eq!(subs.len(), 4);
        for sub in &subs {
            assert_eq!(sub.shape(), &[4, 4, 4]);
        }
        // Re-concatenation along channels restores the frame.
        for pix in 0..16 {
            for ch in 0..16 {
                let got = subs[ch / 4].data()[pix * 4 + ch % 4];
                assert_eq!(got, frame.data()[pix * 16 + ch]);
            }
        }

        let base = aux_image_decode(&model, &frame).unwrap();
        assert_eq!(base.len(), 4);
        // Perturb sub-latent 2 (channels 8..12): only aux frame 2 changes.
        let mut p = frame.clone();
        for pix in 0..16 {
            for ch in 8..12 {
                p.data_mut()[pix * 16 + ch] += 0.5;
            }
        }
        let changed = aux_image_decode(&model, &p).unwrap();
        for k in 0..4 {
            if k == 2 {
                assert_ne!(base[k].data(), changed[k].data());
            } else {
                assert_eq!(base[k].data(), changed[k].data());
            }
        }
    }

    #[test]
    fn loss_fixed_point_and_kl_formula() {
        let cfg = tiny_cfg();
        let window = window_of(&[5, 16, 16, 3], 8);
        let moments = LatentVideo {
            data: Tensor::zeros(&[2, 4, 4, 8]),
            kind: LatentKind::Moments,
        };
        let stride = 16 * 16 * 3;
        let tail = Tensor::from_vec(&[4, 16, 16, 3], window.data()[stride..].to_vec()).unwrap();
        let b = vae_loss(&window, &window, &moments, Some(&tail), &cfg).unwrap();
        assert_eq!(b.l1, 0.0);
        assert_eq!(b.kl, 0.0);
        assert_eq!(b.reg, 0.0);
        assert_eq!(b.total, 0.0);

        // KL at mu = 1, logvar = 0 is 0.5 per element.
        let ones_mu = LatentVideo {
            data: Tensor::from_vec(
                &[1, 1, 1, 8],
                vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            )
            .unwrap(),
            kind: LatentKind::Moments,
        };
        let b = vae_loss(&window, &window, &ones_mu, None, &cfg).unwrap();
        assert!((b.kl - 0.5).abs() < 1e-12, "kl {}", b.kl);

        // All weights zero: total is zero regardless of the inputs.
        let zero_cfg = VaeConfig {
            lambda_l1: 0.0,
            lambda_kl: 0.0,
            lambda_reg: 0.0,
            ..tiny_cfg()
        };
        let other = window_of(&[5, 16, 16, 3], 9);
        let b = vae_loss(&window, &other, &ones_mu, None, &zero_cfg).unwrap();
        assert_eq!(b.total, 0.0);
        assert!(b.l1 > 0.0, "terms are still reported unweighted");
    }

    #[test]
    fn zero_step_training_writes_initial_checkpoint_and_empty_curve() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = VideoVae::new(tiny_cfg(), 1).unwrap();
        let clips = moving_square_clips(2, 6, 16, 16, 3).unwrap();
        let stages = [TrainStage { window: 5, steps: 0, lr: 1e-3 }];
        let history = train_vae(&mut model, &clips, &stages, dir.path(), 4).unwrap();
        assert!(history.is_empty());
        assert!(dir.path().join("vae_stage0.ckpt").exists());
        assert!(!dir.path().join("vae_loss.csv").exists());
    }

    #[test]
    fn short_training_reduces_l1_and_tags_stage_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = VaeConfig {
            aug_translate_prob: 0.0,
            aug_speed_prob: 0.0,
            image_prob: 0.0,
            ..tiny_cfg()
        };
        let mut model = VideoVae::new(cfg, 1).unwrap();
        let clips = moving_square_clips(4, 8, 16, 16, 7).unwrap();
        let stages = [
            TrainStage { window: 5, steps: 30, lr: 2e-3 },
            TrainStage { window: 5, steps: 10, lr: 1e-3 },
        ];
        let history = train_vae(&mut model, &clips, &stages, dir.path(), 6).unwrap();
        assert_eq!(history.len(), 40);
        let first: f64 = history[..5].iter().map(|r| r.l1).sum::<f64>() / 5.0;
        let last: f64 = history[35..].iter().map(|r| r.l1).sum::<f64>() / 5.0;
        assert!(last < first, "L1 should fall: first {first:.4} last {last:.4}");
        assert!(dir.path().join("vae_stage0.ckpt").exists());
        assert!(dir.path().join("vae_stage1.ckpt").exists());
        let csv = std::fs::read_to_string(dir.path().join("vae_loss.csv")).unwrap();
        assert_eq!(csv.lines().count(), 41);
        assert_eq!(csv.lines().next().unwrap(), VAE_LOSS_HEADER);
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = VideoVae::new(tiny_cfg(), 1).unwrap();
        let clips = moving_square_clips(1, 6, 16, 16, 9).unwrap();
        let stages = [TrainStage { window: 5, steps: 3, lr: 1e-3 }];
        train_vae(&mut model, &clips, &stages, dir.path(), 5).unwrap();
        let window = window_of(&[5, 16, 16, 3], 12);
        let before = encode_window(&model, &window).unwrap();
        let loaded = VideoVae::load(&dir.path().join("vae_stage0.ckpt"), tiny_cfg()).unwrap();
        let after = encode_window(&loaded, &window).unwrap();
        assert_eq!(before.data.data(), after.data.data());
    }

    #[test]
    fn bias_profile_has_ft_entries_and_zero_bias_at_cap() {
        assert_eq!(bias_from_profile(&[99.0, 99.0, 99.0, 99.0]), 0.0);
        assert!((bias_from_profile(&[30.0, 30.0, 30.0, 36.0]) - 6.0).abs() < 1e-12);

        let model = VideoVae::new(tiny_cfg(), 1).unwrap();
        let clips = moving_square_clips(2, 6, 16, 16, 3).unwrap();
        let (profile, bias) = last_frame_bias_diagnostic(&model, &clips, 5).unwrap();
        assert_eq!(profile.len(), model.cfg.f_t);
        assert!(bias.is_finite());
    }

    #[test]
    fn temporal_mean_baseline_is_constant_over_frames() {
        let window = window_of(&[4, 8, 8, 3], 2);
        let base = temporal_mean_baseline(&window).unwrap();
        let stride = 8 * 8 * 3;
        for k in 1..4 {
            assert_eq!(
                &base.data()[..stride],
                &base.data()[k * stride..(k + 1) * stride]
            );
        }
        // The mean frame minimizes squared error, so it matches the direct mean.
        let want = (window.data()[0] as f64
            + window.data()[stride] as f64
            + window.data()[2 * stride] as f64
            + window.data()[3 * stride] as f64)
            / 4.0;
        assert!((base.data()[0] as f64 - want).abs() < 1e-6);
    }
}
