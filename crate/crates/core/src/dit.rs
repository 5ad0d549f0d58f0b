//! Diffusion transformer over causal video latents with an interspatial
//! pose stream.
//!
//! The model predicts a flow-matching velocity field on the latent grid of
//! the video autoencoder. Latent tokens run through factorized spatial and
//! temporal self-attention; a parallel stream of 3D surface points exchanges
//! information with them through interspatial attention, grouped per latent
//! frame. Conditioning comes from a reference latent (identity), per-frame
//! camera ray maps, an optional background latent, and — in the flat
//! ablation — a rendered 2D pose map concatenated onto the input.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attn::{
    cross_attention, isa_attention, self_attention, transformer_block, AttentionParams,
    IsaBlockParams, TransformerBlockParams,
};
use crate::body::{project_points, sample_surface, Skeleton};
use crate::ckpt;
use crate::error::{Error, Result};
use crate::flow;
use crate::geometry::{
    build_projection, plucker_image, sinusoidal_pe, CameraPose, ProjectionMatrix, Vec3,
};
use crate::kernels::Conv3dSpec;
use crate::metrics::append_csv_row;
use crate::nn::{AdamConfig, Affine, Bound, Conv3d, LayerNorm, ParamStore};
use crate::rng::substream;
use crate::synth::{render_frame, render_normal_map, ClipAnnotation, SceneBody, VideoClip};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vae::{encode_window, vae_decode, vae_encode, LatentKind, LatentVideo, VideoVae};

/// Which positional scheme the interspatial stage uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    /// Interspatial positional encoding from per-frame projections.
    Ispe,
    /// Interspatial attention without any positional encoding.
    NoPe,
    /// No 3D stream at all; pose enters as rendered 2D maps on the input.
    Render2d,
}

impl AblationMode {
    /// Short tag used in CSV rows and CLI flags.
    pub fn tag(self) -> &'static str {
        match self {
            AblationMode::Ispe => "ispe",
            AblationMode::NoPe => "nope",
            AblationMode::Render2d => "2d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ispe" => Ok(AblationMode::Ispe),
            "nope" => Ok(AblationMode::NoPe),
            "2d" => Ok(AblationMode::Render2d),
            other => Err(Error::Config(format!(
                "unknown ablation mode '{other}' (expected ispe, nope, or 2d)"
            ))),
        }
    }
}

/// Transformer hyperparameters and sampling defaults.
#[derive(Debug, Clone)]
pub struct DitConfig {
    /// Number of transformer blocks.
    pub depth: usize,
    /// Token width; must be even, at least 6, and divisible by `heads`.
    pub d: usize,
    pub heads: usize,
    /// Temporal downsampling factor of the paired autoencoder.
    pub f_t: usize,
    /// Latent channels of the paired autoencoder.
    pub latent_channels: usize,
    /// Surface samples per body for the pose stream.
    pub points_per_body: usize,
    /// Probability of replacing the condition with the null condition per
    /// training step (classifier-free guidance training).
    pub p_drop: f32,
    /// Euler steps used by [`sample_video`].
    pub sampler_steps: usize,
    /// Guidance scale used by [`sample_video`].
    pub cfg_scale: f32,
    pub ablation: AblationMode,
    /// Run the per-block identity cross-attention before the camera one.
    pub identity_before_camera: bool,
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig {
            depth: 2,
            d: 64,
            heads: 4,
            f_t: 4,
            latent_channels: 8,
            points_per_body: 24,
            p_drop: 0.1,
            sampler_steps: 30,
            cfg_scale: 2.0,
            ablation: AblationMode::Ispe,
            identity_before_camera: false,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.d < 6 || self.d % 2 != 0 {
            return Err(Error::Config(format!(
                "token width {} must be even and at least 6",
                self.d
            )));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "token width {} must divide into {} heads",
                self.d, self.heads
            )));
        }
        if self.f_t == 0 {
            return Err(Error::Config("temporal factor must be at least 1".into()));
        }
        if self.latent_channels == 0 {
            return Err(Error::Config("latent channels must be at least 1".into()));
        }
        if self.points_per_body == 0 {
            return Err(Error::Config("points per body must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::Config(format!(
                "condition dropout {} must lie in [0, 1)",
                self.p_drop
            )));
        }
        if self.sampler_steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        Ok(())
    }
}

/// Number of latent frames produced by the causal encoder for a clip with
/// `frames` source frames: the first frame plus `(frames - 1) / f_t` chunks.
pub fn latent_frames(frames: usize, f_t: usize) -> Result<usize> {
    if frames == 0 || f_t == 0 {
        return Err(Error::InvalidArg("empty clip or zero temporal factor".into()));
    }
    if (frames - 1) % f_t != 0 {
        return Err(Error::InvalidArg(format!(
            "clip length {frames} is not 1 + k * {f_t}"
        )));
    }
    Ok(1 + (frames - 1) / f_t)
}

// -- pose tokens -------------------------------------------------------------

/// Surface-point tokens for a whole clip, frame-major: all points of source
/// frame 1 first, then frame 2, and so on. Within a frame the person order
/// and per-person point order are identical across frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTokens {
    /// World positions, one per token.
    pub points: Vec<Vec3>,
    /// 1-based source frame per token; non-decreasing and dense.
    pub frames: Vec<usize>,
    /// Person index per token.
    pub persons: Vec<usize>,
    /// Reference-view sample position per token, in latent texel units
    /// (ready for grid sampling); `None` when the point does not project
    /// into the reference view.
    pub ref_coords: Vec<Option<(f64, f64)>>,
}

impl PoseTokens {
    pub fn empty() -> Self {
        PoseTokens {
            points: Vec::new(),
            frames: Vec::new(),
            persons: Vec::new(),
            ref_coords: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of source frames covered (0 when empty).
    pub fn source_frames(&self) -> usize {
        self.frames.last().copied().unwrap_or(0)
    }

    /// Tokens per source frame (0 when empty).
    pub fn per_frame(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            self.len() / self.source_frames()
        }
    }

    /// Check the frame-major layout: equal metadata lengths, frames starting
    /// at 1, dense and non-decreasing, a uniform token count per frame, and
    /// the same person sequence in every frame.
    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if self.frames.len() != n || self.persons.len() != n || self.ref_coords.len() != n {
            return Err(Error::InvalidArg(
                "pose tokens: metadata lengths disagree".into(),
            ));
        }
        if n == 0 {
            return Ok(());
        }
        if self.frames[0] != 1 {
            return Err(Error::InvalidArg("pose tokens must start at frame 1".into()));
        }
        for w in self.frames.windows(2) {
            if w[1] != w[0] && w[1] != w[0] + 1 {
                return Err(Error::InvalidArg(
                    "pose token frames must be non-decreasing and dense".into(),
                ));
            }
        }
        let t = self.source_frames();
        if n % t != 0 {
            return Err(Error::InvalidArg(
                "pose tokens: token count is not uniform per frame".into(),
            ));
        }
        let pf = n / t;
        let sig: Vec<usize> = self.persons[..pf].to_vec();
        for f in 0..t {
            let lo = f * pf;
            if self.frames[lo..lo + pf].iter().any(|&fr| fr != f + 1) {
                return Err(Error::InvalidArg(
                    "pose tokens: token count is not uniform per frame".into(),
                ));
            }
            if self.persons[lo..lo + pf] != sig[..] {
                return Err(Error::InvalidArg(
                    "pose tokens: person order differs between frames".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Sample `points_per_body` surface points per character and frame from a
/// clip annotation. Reference coordinates come from projecting the frame-1
/// points through the first camera, scaled by `1 / f_s` into latent texel
/// units; points behind the camera or outside the image are `None`.
pub fn pose_tokens_from_annotation(
    ann: &ClipAnnotation,
    width: usize,
    height: usize,
    f_s: usize,
    points_per_body: usize,
    seed: u64,
) -> Result<PoseTokens> {
    if ann.poses.is_empty() || ann.cameras.len() != ann.poses.len() {
        return Err(Error::InvalidArg(
            "annotation needs matching pose and camera tracks".into(),
        ));
    }
    if f_s == 0 || width % f_s != 0 || height % f_s != 0 {
        return Err(Error::InvalidArg(
            "image extent must divide by the spatial factor".into(),
        ));
    }
    let skel = Skeleton::humanoid();
    let chars = ann.poses[0].len();
    let frames = ann.poses.len();
    let mut out = PoseTokens::empty();
    // Per-character reference coordinates, computed from frame 1 and reused
    // for every frame's copy of the same sample identity.
    let mut ref_by_char: Vec<Vec<Option<(f64, f64)>>> = Vec::with_capacity(chars);
    for c in 0..chars {
        let set = sample_surface(
            &skel,
            &ann.poses[0][c],
            points_per_body,
            seed.wrapping_add(c as u64),
        )?;
        let projected = project_points(&set.points, &ann.cameras[0]);
        ref_by_char.push(
            projected
                .iter()
                .map(|p| {
                    let inside =
                        p.valid && p.u >= 0.0 && p.u < width as f64 && p.v >= 0.0 && p.v < height as f64;
                    if inside {
                        Some((p.u / f_s as f64 - 0.5, p.v / f_s as f64 - 0.5))
                    } else {
                        None
                    }
                })
                .collect(),
        );
    }
    for f in 0..frames {
        if ann.poses[f].len() != chars {
            return Err(Error::InvalidArg(
                "annotation has a varying character count".into(),
            ));
        }
        for c in 0..chars {
            let set = sample_surface(
                &skel,
                &ann.poses[f][c],
                points_per_body,
                seed.wrapping_add(c as u64),
            )?;
            for (i, p) in set.points.into_iter().enumerate() {
                out.points.push(p);
                out.frames.push(f + 1);
                out.persons.push(c);
                out.ref_coords.push(ref_by_char[c][i]);
            }
        }
    }
    out.validate()?;
    Ok(out)
}

/// Merge several clips' pose tokens into one multi-person set. All inputs
/// must cover the same source frames; person indices are offset per input so
/// identities stay distinct, and the merged set is frame-major again.
pub fn compose_multiperson(sets: &[PoseTokens]) -> Result<PoseTokens> {
    if sets.is_empty() {
        return Err(Error::InvalidArg("composition needs at least one set".into()));
    }
    let frames = sets[0].source_frames();
    for s in sets {
        s.validate()?;
        if s.source_frames() != frames {
            return Err(Error::InvalidArg(
                "composition needs equal source frame counts".into(),
            ));
        }
    }
    let mut out = PoseTokens::empty();
    let mut offsets = Vec::with_capacity(sets.len());
    let mut next = 0usize;
    for s in sets {
        offsets.push(next);
        next += s.persons.iter().max().map_or(0, |m| m + 1);
    }
    for f in 1..=frames {
        for (s, off) in sets.iter().zip(&offsets) {
            let pf = s.per_frame();
            let lo = (f - 1) * pf;
            for i in lo..lo + pf {
                out.points.push(s.points[i]);
                out.frames.push(f);
                out.persons.push(s.persons[i] + off);
                out.ref_coords.push(s.ref_coords[i]);
            }
        }
    }
    out.validate()?;
    Ok(out)
}

// -- condition bundle --------------------------------------------------------

/// Everything the velocity model is conditioned on for one clip.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    /// Reference-frame latent `[h, w, c]` (identity appearance).
    pub z_ref: Tensor,
    /// Reference frame image `[H, W, 3]`; encoded to the global identity
    /// embedding inside the model so that encoder trains end to end.
    pub ref_image: Tensor,
    /// Ray maps per latent frame `[t, h, w, 6 * f_t]`: the Plücker images of
    /// that latent frame's source-camera group, channel-concatenated.
    pub cam_latent: Tensor,
    /// Background-only latent `[t, h, w, c]`; `None` behaves exactly like a
    /// zero tensor.
    pub z_bg: Option<Tensor>,
    /// 3D surface-point stream; empty in the flat ablation and in the null
    /// condition.
    pub pose: PoseTokens,
    /// Rendered normal maps `[t, h, w, 3]` for the flat ablation.
    pub pose_render: Option<Tensor>,
    /// Per-latent-frame projection used by the interspatial encoding
    /// (middle camera of the frame's source group, at latent resolution).
    pub projections: Vec<ProjectionMatrix>,
}

impl ConditionBundle {
    /// Check every field against the latent video shape `[t, h, w, c]`.
    pub fn validate(&self, latent_shape: &[usize], cfg: &DitConfig) -> Result<()> {
        let [t, h, w, c] = *latent_shape else {
            return Err(Error::Shape(format!(
                "latent video must be rank 4, got {latent_shape:?}"
            )));
        };
        if c != cfg.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {c} channels, model expects {}",
                cfg.latent_channels
            )));
        }
        if self.z_ref.shape() != [h, w, c] {
            return Err(Error::Shape(format!(
                "reference latent shape {:?} does not match [{h}, {w}, {c}]",
                self.z_ref.shape()
            )));
        }
        if self.ref_image.shape().len() != 3 || self.ref_image.shape()[2] != 3 {
            return Err(Error::Shape(format!(
                "reference image must be [H, W, 3], got {:?}",
                self.ref_image.shape()
            )));
        }
        if self.cam_latent.shape() != [t, h, w, 6 * cfg.f_t] {
            return Err(Error::Shape(format!(
                "camera latent shape {:?} does not match [{t}, {h}, {w}, {}]",
                self.cam_latent.shape(),
                6 * cfg.f_t
            )));
        }
        if let Some(bg) = &self.z_bg {
            if bg.shape() != latent_shape {
                return Err(Error::Shape(format!(
                    "background latent shape {:?} does not match {latent_shape:?}",
                    bg.shape()
                )));
            }
        }
        self.pose.validate()?;
        if !self.pose.is_empty() && self.pose.source_frames() != 1 + (t - 1) * cfg.f_t {
            return Err(Error::Shape(format!(
                "pose stream covers {} source frames, latent expects {}",
                self.pose.source_frames(),
                1 + (t - 1) * cfg.f_t
            )));
        }
        if let Some(r) = &self.pose_render {
            if r.shape() != [t, h, w, 3] {
                return Err(Error::Shape(format!(
                    "pose render shape {:?} does not match [{t}, {h}, {w}, 3]",
                    r.shape()
                )));
            }
        }
        if self.projections.len() != t {
            return Err(Error::Shape(format!(
                "{} projections for {t} latent frames",
                self.projections.len()
            )));
        }
        Ok(())
    }

    /// The null condition of the same geometry: zero tensors, an empty pose
    /// stream, and no background or render map. Projections are kept so the
    /// token grid geometry stays intact.
    pub fn null_like(&self) -> Self {
        ConditionBundle {
            z_ref: Tensor::zeros(self.z_ref.shape()),
            ref_image: Tensor::zeros(self.ref_image.shape()),
            cam_latent: Tensor::zeros(self.cam_latent.shape()),
            z_bg: None,
            pose: PoseTokens::empty(),
            pose_render: None,
            projections: self.projections.clone(),
        }
    }

    pub fn is_null(&self) -> bool {
        let zero = |t: &Tensor| t.data().iter().all(|&v| v == 0.0);
        zero(&self.z_ref)
            && zero(&self.ref_image)
            && zero(&self.cam_latent)
            && self.z_bg.is_none()
            && self.pose.is_empty()
            && self.pose_render.is_none()
    }

    /// Divide the latent-valued fields by the model's latent scale.
    pub fn normalized(&self, scale: f32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidArg(format!("bad latent scale {scale}")));
        }
        let mut out = self.clone();
        out.z_ref = scale_tensor(&self.z_ref, 1.0 / scale);
        out.z_bg = self.z_bg.as_ref().map(|b| scale_tensor(b, 1.0 / scale));
        Ok(out)
    }
}

fn scale_tensor(t: &Tensor, s: f32) -> Tensor {
    let data = t.data().iter().map(|&v| v * s).collect();
    Tensor::from_vec(t.shape(), data).expect("shape is unchanged")
}

/// Replace the bundle with its null condition with probability `p_drop`.
pub fn condition_dropout(
    bundle: &ConditionBundle,
    p_drop: f32,
    rng: &mut ChaCha8Rng,
) -> Result<ConditionBundle> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::InvalidArg(format!(
            "condition dropout {p_drop} must lie in [0, 1)"
        )));
    }
    if p_drop > 0.0 && rng.gen::<f32>() < p_drop {
        Ok(bundle.null_like())
    } else {
        Ok(bundle.clone())
    }
}

// -- model -------------------------------------------------------------------

struct DitBlock {
    sp_attn: AttentionParams,
    sp: TransformerBlockParams,
    tm_attn: AttentionParams,
    tm: TransformerBlockParams,
    pt_attn: AttentionParams,
    pt: TransformerBlockParams,
    isa: IsaBlockParams,
    cam_ln: LayerNorm,
    cam_attn: AttentionParams,
    id_ln: LayerNorm,
    id_attn: AttentionParams,
}

/// The velocity model: parameter store plus layer handles.
pub struct DitModel {
    pub cfg: DitConfig,
    pub store: ParamStore,
    /// Scalar standard deviation of the training latents; latents are
    /// divided by it before entering the model.
    pub latent_scale: f32,
    patch: Affine,
    idcat: Affine,
    idcross: AttentionParams,
    bgcat: Affine,
    rdcat: Affine,
    time1: Affine,
    time2: Affine,
    pose1: Affine,
    pose2: Affine,
    id3d: Affine,
    gid: Vec<Conv3d>,
    blocks: Vec<DitBlock>,
    head_ln: LayerNorm,
    head: Affine,
}

/// Channel widths of the global identity encoder (input is RGB).
const GID_WIDTHS: [usize; 2] = [16, 32];

impl DitModel {
    pub fn new(cfg: DitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Self::build(cfg, ParamStore::new(), seed)
    }

    /// Load parameters from a checkpoint; stored values win over fresh
    /// initialization, and the latent scale rides along as an extra entry.
    pub fn load(path: &Path, cfg: DitConfig) -> Result<Self> {
        cfg.validate()?;
        let mut scale = 1.0f32;
        let mut rest = Vec::new();
        for (name, tensor) in ckpt::load_entries(path)? {
            if name == "latent_scale" {
                scale = tensor.data()[0];
            } else {
                rest.push((name, tensor));
            }
        }
        let mut store = ParamStore::new();
        store.load_entries(rest);
        let mut model = Self::build(cfg, store, 0)?;
        model.latent_scale = scale;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = self.store.to_entries(true);
        entries.push(("latent_scale".to_string(), Tensor::scalar(self.latent_scale)));
        ckpt::save_entries(path, &entries)
    }

    fn build(cfg: DitConfig, mut store: ParamStore, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, "dit-init", 0);
        let (d, h, c, ck) = (cfg.d, cfg.heads, cfg.latent_channels, 6 * cfg.f_t);
        let s = &mut store;
        let r = &mut rng;
        let patch = Affine::new(s, r, "patch", c, d, false);
        let idcat = Affine::new(s, r, "idcat", d + c, d, false);
        let idcross = AttentionParams::self_params(s, r, "idcross", d, h)?;
        let bgcat = Affine::new(s, r, "bgcat", d + c, d, false);
        let rdcat = Affine::new(s, r, "rdcat", d + 3, d, false);
        let time1 = Affine::new(s, r, "time.f1", d, d, false);
        let time2 = Affine::new(s, r, "time.f2", d, d, false);
        let pose1 = Affine::new(s, r, "pose.f1", d, d, false);
        let pose2 = Affine::new(s, r, "pose.f2", d, d, false);
        let id3d = Affine::new(s, r, "id3d", c, d, false);
        let mut gid = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in GID_WIDTHS.iter().chain([&d]).enumerate() {
            let spec = Conv3dSpec {
                kt: 1,
                kh: 3,
                kw: 3,
                c_in,
                c_out,
                st: 1,
                sh: 2,
                sw: 2,
            };
            gid.push(Conv3d::new(s, r, &format!("gid.c{i}"), spec));
            c_in = c_out;
        }
        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let pre = format!("blk{b}");
            blocks.push(DitBlock {
                sp_attn: AttentionParams::self_params(s, r, &format!("{pre}.sp.attn"), d, h)?,
                sp: TransformerBlockParams::new(s, r, &format!("{pre}.sp"), d),
                tm_attn: AttentionParams::self_params(s, r, &format!("{pre}.tm.attn"), d, h)?,
                tm: TransformerBlockParams::new(s, r, &format!("{pre}.tm"), d),
                pt_attn: AttentionParams::self_params(s, r, &format!("{pre}.pt.attn"), d, h)?,
                pt: TransformerBlockParams::new(s, r, &format!("{pre}.pt"), d),
                isa: IsaBlockParams::new(s, r, &format!("{pre}.isa"), d, h)?,
                cam_ln: LayerNorm::new(s, r, &format!("{pre}.cam.ln"), d),
                cam_attn: AttentionParams::new(s, r, &format!("{pre}.cam.attn"), d, d, ck, h)?,
                id_ln: LayerNorm::new(s, r, &format!("{pre}.id.ln"), d),
                id_attn: AttentionParams::self_params(s, r, &format!("{pre}.id.attn"), d, h)?,
            });
        }
        let head_ln = LayerNorm::new(s, r, "head.ln", d);
        let head = Affine::new(s, r, "head.out", d, c, true);
        Ok(DitModel {
            cfg,
            store,
            latent_scale: 1.0,
            patch,
            idcat,
            idcross,
            bgcat,
            rdcat,
            time1,
            time2,
            pose1,
            pose2,
            id3d,
            gid,
            blocks,
            head_ln,
            head,
        })
    }

    /// Encode the reference image into a 2×2 grid of pooled identity tokens
    /// `[4, d]`: three stride-2 convolutions, then quadrant-mean pooling of
    /// the final feature map.
    fn global_identity_t(&self, tape: &mut Tape, p: &Bound, image: &Tensor) -> Result<Var> {
        let sh = image.shape();
        if sh.len() != 3 || sh[2] != 3 {
            return Err(Error::Shape(format!(
                "reference image must be [H, W, 3], got {sh:?}"
            )));
        }
        let window = image.reshaped(&[1, sh[0], sh[1], 3])?;
        let mut x = tape.constant(window);
        for conv in &self.gid {
            x = conv.forward(tape, p, x)?;
            x = tape.gelu(x);
        }
        let fs = tape.shape(x).to_vec();
        let (fh, fw) = (fs[1], fs[2]);
        let flat = tape.reshape(x, &[fh * fw, self.cfg.d])?;
        let pool = tape.constant(quadrant_pool_matrix(fh, fw));
        tape.matmul(pool, flat)
    }

    /// Sinusoidal embedding of the diffusion time, refined by a 2-layer MLP;
    /// returns `[1, d]`.
    fn time_embedding_t(&self, tape: &mut Tape, p: &Bound, t: f32) -> Result<Var> {
        let pe = padded_pe(&[t], self.cfg.d)?;
        let v = tape.constant(Tensor::from_vec(&[1, self.cfg.d], pe)?);
        let h = self.time1.forward(tape, p, v)?;
        let h = tape.gelu(h);
        self.time2.forward(tape, p, h)
    }

    /// Embed world surface points: sinusoidal encoding of the raw
    /// coordinates, then a 2-layer MLP to width d. Returns `[m, d]`.
    fn encode_points_t(&self, tape: &mut Tape, p: &Bound, points: &[Vec3]) -> Result<Var> {
        let d = self.cfg.d;
        let mut data = Vec::with_capacity(points.len() * d);
        for pt in points {
            data.extend(padded_pe(&[pt[0] as f32, pt[1] as f32, pt[2] as f32], d)?);
        }
        let v = tape.constant(Tensor::from_vec(&[points.len(), d], data)?);
        let h = self.pose1.forward(tape, p, v)?;
        let h = tape.gelu(h);
        self.pose2.forward(tape, p, h)
    }

    /// Add per-point identity features sampled from the reference latent at
    /// each token's reference-view position; tokens without a valid
    /// projection are left unchanged.
    fn identity_inject_3d_t(
        &self,
        tape: &mut Tape,
        p: &Bound,
        y: Var,
        z_ref_map: Var,
        pose: &PoseTokens,
    ) -> Result<Var> {
        let m = pose.len();
        if m == 0 || pose.ref_coords.iter().all(|c| c.is_none()) {
            return Ok(y);
        }
        let mut coords = Vec::with_capacity(m * 2);
        let mut mask = Vec::with_capacity(m * self.cfg.d);
        for rc in &pose.ref_coords {
            let (i, j, on) = match rc {
                Some((i, j)) => (*i as f32, *j as f32, 1.0),
                None => (0.0, 0.0, 0.0),
            };
            coords.push(i);
            coords.push(j);
            mask.extend(std::iter::repeat(on).take(self.cfg.d));
        }
        let coords = Tensor::from_vec(&[m, 2], coords)?;
        let feats = tape.grid_sample(z_ref_map, &coords)?;
        let proj = self.id3d.forward(tape, p, feats)?;
        let mask = tape.constant(Tensor::from_vec(&[m, self.cfg.d], mask)?);
        let gated = tape.mul(proj, mask)?;
        tape.add(y, gated)
    }

    /// Predict the velocity field for noisy latents `x_t` at time `t` under
    /// `bundle`; returns a `[t, h, w, c]` variable on the tape.
    pub fn forward_t(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x_t: &Tensor,
        t: f32,
        bundle: &ConditionBundle,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        bundle.validate(x_t.shape(), cfg)?;
        let [tl, h, w, c] = *x_t.shape() else { unreachable!() };
        let (hw, d) = (h * w, cfg.d);
        let n = tl * hw;

        // Input conditioning: patch embed, identity, background, render map.
        let x = tape.constant(x_t.reshaped(&[n, c])?);
        let mut z = self.patch.forward(tape, p, x)?;
        let emb = self.global_identity_t(tape, p, &bundle.ref_image)?;
        let z_ref_map = tape.constant(bundle.z_ref.clone());
        {
            let ref_rows = tile_rows(&bundle.z_ref.reshaped(&[hw, c])?, tl);
            let ref_rows = tape.constant(ref_rows);
            let cat = tape.concat(&[z, ref_rows], 1)?;
            z = self.idcat.forward(tape, p, cat)?;
            let a = cross_attention(tape, p, &self.idcross, z, emb)?;
            z = tape.add(z, a)?;
        }
        {
            let bg = match &bundle.z_bg {
                Some(b) => b.reshaped(&[n, c])?,
                None => Tensor::zeros(&[n, c]),
            };
            let bg = tape.constant(bg);
            let cat = tape.concat(&[z, bg], 1)?;
            z = self.bgcat.forward(tape, p, cat)?;
        }
        {
            let rd = match &bundle.pose_render {
                Some(r) => r.reshaped(&[n, 3])?,
                None => Tensor::zeros(&[n, 3]),
            };
            let rd = tape.constant(rd);
            let cat = tape.concat(&[z, rd], 1)?;
            z = self.rdcat.forward(tape, p, cat)?;
        }
        let grid_pe = tape.constant(token_grid_pe(tl, h, w, d)?);
        z = tape.add(z, grid_pe)?;
        let temb = self.time_embedding_t(tape, p, t)?;
        let temb_rows = broadcast_rows(tape, temb, n)?;
        z = tape.add(z, temb_rows)?;

        // Pose stream setup.
        let pose = &bundle.pose;
        let mut y = if pose.is_empty() {
            None
        } else {
            let mut yv = self.encode_points_t(tape, p, &pose.points)?;
            let trows = broadcast_rows(tape, temb, pose.len())?;
            yv = tape.add(yv, trows)?;
            yv = self.identity_inject_3d_t(tape, p, yv, z_ref_map, pose)?;
            Some(yv)
        };
        let geom = if pose.is_empty() {
            Vec::new()
        } else {
            frame_geometry(tape, pose, &bundle.projections, tl, cfg)?
        };
        let pe_z = match cfg.ablation {
            AblationMode::NoPe => tape.constant(Tensor::zeros(&[hw, d])),
            _ => tape.constant(frame_token_ispe(h, w, d)?),
        };

        // Per-frame camera ray keys.
        let ck = 6 * cfg.f_t;
        let cam_keys: Vec<Var> = (0..tl)
            .map(|l| {
                let stride = hw * ck;
                let data = bundle.cam_latent.data()[l * stride..(l + 1) * stride].to_vec();
                Ok(tape.constant(Tensor::from_vec(&[hw, ck], data)?))
            })
            .collect::<Result<_>>()?;

        for blk in &self.blocks {
            // Factorized self-attention: spatial within each frame, then
            // temporal across frames at each grid position.
            z = transformer_block(tape, p, &blk.sp, z, |tp, nx| {
                chunked_self_attention(tp, p, &blk.sp_attn, nx, hw)
            })?;
            z = interleave(tape, z, tl, hw, d)?;
            z = transformer_block(tape, p, &blk.tm, z, |tp, nx| {
                chunked_self_attention(tp, p, &blk.tm_attn, nx, tl)
            })?;
            z = interleave(tape, z, hw, tl, d)?;

            if let Some(yv) = y {
                // Pose temporal attention: per sample identity across frames.
                let t_src = pose.source_frames();
                let pf = pose.per_frame();
                let mut yt = interleave(tape, yv, t_src, pf, d)?;
                yt = transformer_block(tape, p, &blk.pt, yt, |tp, nx| {
                    chunked_self_attention(tp, p, &blk.pt_attn, nx, t_src)
                })?;
                let yv = interleave(tape, yt, pf, t_src, d)?;
                // Interspatial exchange.
                let (z2, y2) = isa_stage(tape, p, &blk.isa, z, yv, &geom, pe_z, hw)?;
                z = z2;
                y = Some(y2);
            } else {
                // Keep the latent stream's per-block depth without a pose
                // stream: the attention half contributes nothing (empty key
                // set), leaving the pre-norm feed-forward.
                let nz = blk.isa.ln_z2.forward(tape, p, z)?;
                let f = blk.isa.ffn_z.forward(tape, p, nz)?;
                z = tape.add(z, f)?;
            }

            for stage in 0..2 {
                let camera_now = stage == if cfg.identity_before_camera { 1 } else { 0 };
                if camera_now {
                    let zq = blk.cam_ln.forward(tape, p, z)?;
                    let mut parts = Vec::with_capacity(tl);
                    for (l, keys) in cam_keys.iter().enumerate() {
                        let q = tape.slice(zq, 0, l * hw, hw)?;
                        parts.push(cross_attention(tape, p, &blk.cam_attn, q, *keys)?);
                    }
                    let a = tape.concat(&parts, 0)?;
                    z = tape.add(z, a)?;
                } else {
                    let zq = blk.id_ln.forward(tape, p, z)?;
                    let a = cross_attention(tape, p, &blk.id_attn, zq, emb)?;
                    z = tape.add(z, a)?;
                }
            }
        }

        let nz = self.head_ln.forward(tape, p, z)?;
        let v = self.head.forward(tape, p, nz)?;
        tape.reshape(v, &[tl, h, w, c])
    }
}

// -- forward helpers ---------------------------------------------------------

/// Sinusoidal encoding padded with zeros up to `dim` (the encoding itself
/// needs a multiple of `2 * coords.len()`).
fn padded_pe(coords: &[f32], dim: usize) -> Result<Vec<f32>> {
    let step = 2 * coords.len();
    let used = dim - dim % step;
    if used == 0 {
        return Err(Error::Config(format!(
            "width {dim} too small for a {}-coordinate encoding",
            coords.len()
        )));
    }
    let mut v = sinusoidal_pe(coords, used)?;
    v.resize(dim, 0.0);
    Ok(v)
}

/// Fixed positional table for the latent token grid: sinusoidal in
/// normalized (x, y, frame); `[t * h * w, d]`.
fn token_grid_pe(t: usize, h: usize, w: usize, d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(t * h * w * d);
    for l in 0..t {
        for y in 0..h {
            for x in 0..w {
                let coords = [
                    (x as f32 + 0.5) / w as f32,
                    (y as f32 + 0.5) / h as f32,
                    (l as f32 + 0.5) / t as f32,
                ];
                data.extend(padded_pe(&coords, d)?);
            }
        }
    }
    Tensor::from_vec(&[t * h * w, d], data)
}

/// Interspatial encoding of one latent frame's token centers; `[h * w, d]`.
fn frame_token_ispe(h: usize, w: usize, d: usize) -> Result<Tensor> {
    let mut coords = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            coords.push((x as f64 + 0.5, y as f64 + 0.5));
        }
    }
    crate::attn::ispe_encode_2d(&coords, w, h, d)
}

/// Repeat a `[rows, c]` tensor `times` times along axis 0.
fn tile_rows(t: &Tensor, times: usize) -> Tensor {
    let sh = t.shape();
    let mut data = Vec::with_capacity(t.data().len() * times);
    for _ in 0..times {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(&[sh[0] * times, sh[1]], data).expect("tile keeps the row shape")
}

/// Broadcast a `[1, d]` row to `[n, d]` differentiably.
fn broadcast_rows(tape: &mut Tape, row: Var, n: usize) -> Result<Var> {
    let ones = tape.constant(Tensor::from_vec(&[n, 1], vec![1.0; n])?);
    tape.matmul(ones, row)
}

/// `[a * b, d]` viewed as `[a, b, d]`, transposed to `[b, a, d]`, flattened.
fn interleave(tape: &mut Tape, x: Var, a: usize, b: usize, d: usize) -> Result<Var> {
    let r = tape.reshape(x, &[a, b, d])?;
    let t = tape.permute(r, &[1, 0, 2])?;
    tape.reshape(t, &[b * a, d])
}

/// Self-attention within consecutive chunks of `chunk` tokens.
fn chunked_self_attention(
    tape: &mut Tape,
    p: &Bound,
    params: &AttentionParams,
    x: Var,
    chunk: usize,
) -> Result<Var> {
    let n = tape.shape(x)[0];
    if n == chunk {
        return self_attention(tape, p, params, x);
    }
    debug_assert_eq!(n % chunk, 0);
    let mut parts = Vec::with_capacity(n / chunk);
    for i in 0..n / chunk {
        let s = tape.slice(x, 0, i * chunk, chunk)?;
        parts.push(self_attention(tape, p, params, s)?);
    }
    tape.concat(&parts, 0)
}

/// Mean-pooling matrix over the 2×2 quadrants of an `fh × fw` grid;
/// degenerate extents fall back to full-map means.
fn quadrant_pool_matrix(fh: usize, fw: usize) -> Tensor {
    let (mh, mw) = (fh.div_ceil(2), fw.div_ceil(2));
    let mut data = vec![0.0f32; 4 * fh * fw];
    for (cell, (ys, xs)) in [
        (0..mh, 0..mw),
        (0..mh, mw..fw),
        (mh..fh, 0..mw),
        (mh..fh, mw..fw),
    ]
    .into_iter()
    .enumerate()
    {
        let (ys, xs) = if ys.is_empty() || xs.is_empty() {
            (0..fh, 0..fw)
        } else {
            (ys, xs)
        };
        let count = (ys.len() * xs.len()) as f32;
        for y in ys {
            for x in xs.clone() {
                data[cell * fh * fw + y * fw + x] = 1.0 / count;
            }
        }
    }
    Tensor::from_vec(&[4, fh * fw], data).expect("pool matrix extent")
}

/// Row range of tokens whose source frame lies in `lo..=hi` (1-based,
/// clamped); relies on the frame-major layout.
fn frame_rows(pose: &PoseTokens, lo: usize, hi: usize) -> (usize, usize) {
    let t = pose.source_frames();
    let pf = pose.per_frame();
    let lo = lo.max(1);
    let hi = hi.min(t);
    if lo > hi {
        return (0, 0);
    }
    ((lo - 1) * pf, (hi - lo + 1) * pf)
}

/// Per-latent-frame interspatial geometry: the query partition updated by
/// that frame, the overlapping key group, and their 3D encodings.
struct FrameGeom {
    part: (usize, usize),
    grp: (usize, usize),
    pe_part: Var,
    pe_grp: Var,
}

/// The source-frame partition that latent frame `l` (1-based) updates:
/// frame 1 alone for `l = 1`, then blocks of `f_t` frames.
fn partition_range(l: usize, f_t: usize) -> (usize, usize) {
    if l == 1 {
        (1, 1)
    } else {
        (2 + (l - 2) * f_t, 1 + (l - 1) * f_t)
    }
}

/// The overlapping key group for latent frame `l`: the pose frame group of
/// index `max(l - 1, 1)`, whose closed range `1 + f_t (j-1) ..= 1 + f_t j`
/// shares one boundary frame with its neighbors.
fn group_range(l: usize, f_t: usize) -> (usize, usize) {
    let j = l.saturating_sub(1).max(1);
    (1 + f_t * (j - 1), 1 + f_t * j)
}

fn frame_geometry(
    tape: &mut Tape,
    pose: &PoseTokens,
    projections: &[ProjectionMatrix],
    tl: usize,
    cfg: &DitConfig,
) -> Result<Vec<FrameGeom>> {
    let mut out = Vec::with_capacity(tl);
    for l in 1..=tl {
        let (plo, phi) = partition_range(l, cfg.f_t);
        let part = frame_rows(pose, plo, phi);
        let (glo, ghi) = group_range(l, cfg.f_t);
        let grp = frame_rows(pose, glo, ghi);
        let (pe_part, pe_grp) = match cfg.ablation {
            AblationMode::NoPe => (
                tape.constant(Tensor::zeros(&[part.1, cfg.d])),
                tape.constant(Tensor::zeros(&[grp.1, cfg.d])),
            ),
            _ => {
                let proj = &projections[l - 1];
                let ppts = &pose.points[part.0..part.0 + part.1];
                let gpts = &pose.points[grp.0..grp.0 + grp.1];
                (
                    tape.constant(crate::attn::ispe_encode_3d(ppts, proj, cfg.d)?),
                    tape.constant(crate::attn::ispe_encode_3d(gpts, proj, cfg.d)?),
                )
            }
        };
        out.push(FrameGeom {
            part,
            grp,
            pe_part,
            pe_grp,
        });
    }
    Ok(out)
}

/// One sequential interspatial stage: pose tokens query their latent frame,
/// pass through their feed-forward, then each latent frame queries its
/// updated overlap group.
#[allow(clippy::too_many_arguments)]
fn isa_stage(
    tape: &mut Tape,
    p: &Bound,
    params: &IsaBlockParams,
    z: Var,
    y: Var,
    geom: &[FrameGeom],
    pe_z: Var,
    hw: usize,
) -> Result<(Var, Var)> {
    let zn = params.ln_z1.forward(tape, p, z)?;
    let yn = params.ln_y1.forward(tape, p, y)?;

    // 3D tokens query their latent frame's 2D tokens; the partition covers
    // every pose token exactly once, so concatenation preserves order.
    let mut y_parts = Vec::with_capacity(geom.len());
    for (l0, g) in geom.iter().enumerate() {
        if g.part.1 == 0 {
            continue;
        }
        let q = tape.slice(yn, 0, g.part.0, g.part.1)?;
        let kv = tape.slice(zn, 0, l0 * hw, hw)?;
        y_parts.push(isa_attention(
            tape,
            p,
            &params.attn_3d,
            q,
            g.pe_part,
            kv,
            pe_z,
        )?);
    }
    let y_attn = tape.concat(&y_parts, 0)?;
    let y1 = tape.add(y, y_attn)?;
    let ny = params.ln_y2.forward(tape, p, y1)?;
    let fy = params.ffn_y.forward(tape, p, ny)?;
    let y2 = tape.add(y1, fy)?;

    // 2D tokens query the updated pose tokens of their overlap group.
    let y2n = params.ln_y1.forward(tape, p, y2)?;
    let mut z_parts = Vec::with_capacity(geom.len());
    for (l0, g) in geom.iter().enumerate() {
        let q = tape.slice(zn, 0, l0 * hw, hw)?;
        let kv = tape.slice(y2n, 0, g.grp.0, g.grp.1)?;
        z_parts.push(isa_attention(
            tape,
            p,
            &params.attn_2d,
            q,
            pe_z,
            kv,
            g.pe_grp,
        )?);
    }
    let z_attn = tape.concat(&z_parts, 0)?;
    let z1 = tape.add(z, z_attn)?;
    let nz = params.ln_z2.forward(tape, p, z1)?;
    let fz = params.ffn_z.forward(tape, p, nz)?;
    let z2 = tape.add(z1, fz)?;
    Ok((z2, y2))
}

// -- condition bundle construction -------------------------------------------

/// Camera intrinsics rescaled to the latent grid (extrinsics unchanged).
fn scale_camera(cam: &CameraPose, f_s: usize) -> CameraPose {
    let f = f_s as f64;
    CameraPose {
        rotation: cam.rotation,
        translation: cam.translation,
        fx: cam.fx / f,
        fy: cam.fy / f,
        cx: cam.cx / f,
        cy: cam.cy / f,
        near: cam.near,
        far: cam.far,
    }
}

/// 0-based source-frame groups feeding each latent frame's camera channels:
/// consecutive runs of `f_t` frames, the last padded by repeating the final
/// frame.
fn camera_groups(t_lat: usize, f_t: usize, total: usize) -> Vec<Vec<usize>> {
    (0..t_lat)
        .map(|l| (0..f_t).map(|i| (l * f_t + i).min(total - 1)).collect())
        .collect()
}

/// 1-based middle source frame of latent frame `l`'s pose group.
fn group_mid_frame(l: usize, f_t: usize, total: usize) -> usize {
    let (lo, hi) = group_range(l, f_t);
    let hi = hi.min(total);
    let len = hi - lo + 1;
    lo + len / 2
}

/// Posterior mean of the clip under the autoencoder, `[t, h, w, c]`.
pub fn clip_mean_latent(vae: &VideoVae, clip: &VideoClip) -> Result<Tensor> {
    let lat = vae_encode(vae, clip)?;
    let (mu, _) = lat.split_moments()?;
    Ok(mu)
}

/// Assemble the full condition bundle for one annotated clip: reference
/// latent and image, per-latent-frame camera ray maps, background latent,
/// pose stream (or rendered pose maps in the flat ablation), and the
/// interspatial projections.
pub fn build_condition_bundle(
    vae: &VideoVae,
    cfg: &DitConfig,
    clip: &VideoClip,
    ann: &ClipAnnotation,
    pose_seed: u64,
) -> Result<ConditionBundle> {
    if vae.cfg.f_t != cfg.f_t || vae.cfg.c != cfg.latent_channels {
        return Err(Error::Config(format!(
            "autoencoder (f_t {}, c {}) does not match the transformer (f_t {}, c {})",
            vae.cfg.f_t, vae.cfg.c, cfg.f_t, cfg.latent_channels
        )));
    }
    let frames = clip.frame_count();
    if ann.poses.len() != frames || ann.cameras.len() != frames {
        return Err(Error::InvalidArg(format!(
            "annotation covers {} frames, clip has {frames}",
            ann.poses.len().min(ann.cameras.len())
        )));
    }
    let t_lat = latent_frames(frames, cfg.f_t)?;
    let (height, width) = (clip.height(), clip.width());
    let f_s = vae.cfg.f_s;
    if width % f_s != 0 || height % f_s != 0 {
        return Err(Error::InvalidArg(
            "clip extent must divide by the spatial factor".into(),
        ));
    }
    let (h, w) = (height / f_s, width / f_s);
    let c = cfg.latent_channels;

    let ref_image = clip.frame(0);
    let ref_window = ref_image.reshaped(&[1, height, width, 3])?;
    let (ref_mu, _) = encode_window(vae, &ref_window)?.split_moments()?;
    let z_ref = ref_mu.reshaped(&[h, w, c])?;

    let ck = 6 * cfg.f_t;
    let mut cam_data = vec![0.0f32; t_lat * h * w * ck];
    for (l, group) in camera_groups(t_lat, cfg.f_t, frames).iter().enumerate() {
        for (gi, &f) in group.iter().enumerate() {
            let img = plucker_image(&scale_camera(&ann.cameras[f], f_s), h, w);
            let src = img.data();
            for pix in 0..h * w {
                let dst = (l * h * w + pix) * ck + gi * 6;
                cam_data[dst..dst + 6].copy_from_slice(&src[pix * 6..pix * 6 + 6]);
            }
        }
    }
    let cam_latent = Tensor::from_vec(&[t_lat, h, w, ck], cam_data)?;

    let mut bg_frames = Vec::with_capacity(frames * height * width * 3);
    for k in 0..frames {
        let frame = render_frame(&[], &ann.cameras[k], &ann.background, width, height)?;
        bg_frames.extend_from_slice(frame.data());
    }
    let bg_clip = VideoClip::new(Tensor::from_vec(&[frames, height, width, 3], bg_frames)?)?;
    let (bg_mu, _) = vae_encode(vae, &bg_clip)?.split_moments()?;

    let pose = match cfg.ablation {
        AblationMode::Render2d => PoseTokens::empty(),
        _ => pose_tokens_from_annotation(ann, width, height, f_s, cfg.points_per_body, pose_seed)?,
    };

    let pose_render = match cfg.ablation {
        AblationMode::Render2d => {
            let skel = Skeleton::humanoid();
            let chars = ann.poses[0].len();
            let mut data = Vec::with_capacity(t_lat * h * w * 3);
            for l in 1..=t_lat {
                let mid = group_mid_frame(l, cfg.f_t, frames);
                let bodies: Vec<SceneBody> = (0..chars)
                    .map(|ch| SceneBody {
                        skeleton: &skel,
                        pose: &ann.poses[mid - 1][ch],
                        appearance: ann.appearances[ch].clone(),
                    })
                    .collect();
                let map = render_normal_map(&bodies, &scale_camera(&ann.cameras[mid - 1], f_s), w, h)?;
                data.extend_from_slice(map.data());
            }
            Some(Tensor::from_vec(&[t_lat, h, w, 3], data)?)
        }
        _ => None,
    };

    let projections = (1..=t_lat)
        .map(|l| {
            let mid = group_mid_frame(l, cfg.f_t, frames);
            build_projection(&scale_camera(&ann.cameras[mid - 1], f_s), w, h)
        })
        .collect::<Result<Vec<_>>>()?;

    let bundle = ConditionBundle {
        z_ref,
        ref_image,
        cam_latent,
        z_bg: Some(bg_mu),
        pose,
        pose_render,
        projections,
    };
    bundle.validate(&[t_lat, h, w, c], cfg)?;
    Ok(bundle)
}

// -- training and sampling ---------------------------------------------------

pub const DIT_LOSS_HEADER: &str = "step,train_loss,val_loss,ablation_mode";

#[derive(Debug, Clone)]
pub struct DitTrainConfig {
    pub steps: usize,
    pub lr: f32,
    /// Steps between validation passes (also run at the final step);
    /// 0 disables validation.
    pub val_every: usize,
    /// Steps between periodic checkpoint writes; 0 keeps only the initial
    /// and final checkpoints.
    pub checkpoint_every: usize,
}

impl Default for DitTrainConfig {
    fn default() -> Self {
        DitTrainConfig {
            steps: 1000,
            lr: 1e-3,
            val_every: 100,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DitTrainRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::from_vec(shape, data).expect("requested shape")
}

/// Population standard deviation across all entries of all tensors.
fn latent_std(tensors: &[&Tensor]) -> f32 {
    let mut sum = 0.0f64;
    let mut sq = 0.0f64;
    let mut n = 0usize;
    for t in tensors {
        for &v in t.data() {
            sum += v as f64;
            sq += (v as f64) * (v as f64);
            n += 1;
        }
    }
    if n == 0 {
        return 1.0;
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    (var.sqrt().max(1e-6)) as f32
}

fn prepare_clips(
    vae: &VideoVae,
    cfg: &DitConfig,
    clips: &[(VideoClip, ClipAnnotation)],
    pose_seed: u64,
) -> Result<Vec<(Tensor, ConditionBundle)>> {
    clips
        .iter()
        .map(|(clip, ann)| {
            let mu = clip_mean_latent(vae, clip)?;
            let bundle = build_condition_bundle(vae, cfg, clip, ann, pose_seed)?;
            Ok((mu, bundle))
        })
        .collect()
}

/// Flow-matching training of the velocity model over frozen autoencoder
/// latents. Writes `dit.ckpt` (at start, every `checkpoint_every` steps, and
/// at the end) and appends to `dit_loss.csv`; a non-finite loss aborts with
/// the last checkpoint retained.
pub fn train_dit(
    model: &mut DitModel,
    vae: &VideoVae,
    train: &[(VideoClip, ClipAnnotation)],
    val: &[(VideoClip, ClipAnnotation)],
    tc: &DitTrainConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<DitTrainRecord>> {
    if train.is_empty() {
        return Err(Error::InvalidArg("training needs a non-empty clip set".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let csv = out_dir.join("dit_loss.csv");
    let ckpt_path = out_dir.join("dit.ckpt");

    let mut train_set = prepare_clips(vae, &model.cfg, train, seed)?;
    let mut val_set = prepare_clips(vae, &model.cfg, val, seed)?;
    let scale = latent_std(&train_set.iter().map(|(mu, _)| mu).collect::<Vec<_>>());
    model.latent_scale = scale;
    for (mu, bundle) in train_set.iter_mut().chain(val_set.iter_mut()) {
        *mu = scale_tensor(mu, 1.0 / scale);
        *bundle = bundle.normalized(scale)?;
    }
    let nulls: Vec<ConditionBundle> = train_set.iter().map(|(_, b)| b.null_like()).collect();

    model.save(&ckpt_path)?;
    let mut records = Vec::with_capacity(tc.steps);
    for s in 0..tc.steps {
        let mut r = substream(seed, "dit-train", s as u64);
        let idx = r.gen_range(0..train_set.len());
        let t: f32 = r.gen_range(0.0..1.0);
        let dropped = model.cfg.p_drop > 0.0 && r.gen::<f32>() < model.cfg.p_drop;
        let (x0, bundle) = &train_set[idx];
        let bundle = if dropped { &nulls[idx] } else { bundle };

        let mut er = substream(seed, "dit-eps", s as u64);
        let eps = normal_tensor(x0.shape(), &mut er);
        let x_t = flow::flow_perturb(x0, &eps, t)?;
        let v_tgt = flow::flow_target(x0, &eps)?;

        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let v_hat = model.forward_t(&mut tape, &p, &x_t, t, bundle)?;
        let tgt = tape.constant(v_tgt);
        let diff = tape.sub(v_hat, tgt)?;
        let sq = tape.sqr(diff);
        let loss = tape.mean_all(sq);
        let train_loss = tape.value(loss).data()[0] as f64;
        if !train_loss.is_finite() {
            return Err(Error::InvalidArg(format!(
                "non-finite loss {train_loss} at step {s}; aborting with the last checkpoint retained"
            )));
        }
        let mut grads = tape.backward(loss)?;
        model.store.adam_step(
            &p,
            &mut grads,
            AdamConfig {
                lr: tc.lr,
                ..AdamConfig::default()
            },
        );

        let val_loss = if !val_set.is_empty()
            && tc.val_every > 0
            && ((s + 1) % tc.val_every == 0 || s + 1 == tc.steps)
        {
            Some(validation_loss(model, &val_set, seed)?)
        } else {
            None
        };
        append_csv_row(
            &csv,
            DIT_LOSS_HEADER,
            &format!(
                "{},{},{},{}",
                s,
                train_loss,
                val_loss.map(|v| v.to_string()).unwrap_or_default(),
                model.cfg.ablation.tag()
            ),
        )?;
        records.push(DitTrainRecord {
            step: s,
            train_loss,
            val_loss,
        });
        if tc.checkpoint_every > 0 && (s + 1) % tc.checkpoint_every == 0 {
            model.save(&ckpt_path)?;
        }
    }
    model.save(&ckpt_path)?;
    Ok(records)
}

/// Mean velocity error over fixed per-clip noise and times t = ¼, ½, ¾;
/// deterministic in (seed, clip index) so runs are comparable step to step.
fn validation_loss(
    model: &DitModel,
    val: &[(Tensor, ConditionBundle)],
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (vi, (x0, bundle)) in val.iter().enumerate() {
        let mut er = substream(seed, "dit-val", vi as u64);
        let eps = normal_tensor(x0.shape(), &mut er);
        for &t in &[0.25f32, 0.5, 0.75] {
            let x_t = flow::flow_perturb(x0, &eps, t)?;
            let v_tgt = flow::flow_target(x0, &eps)?;
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let v_hat = model.forward_t(&mut tape, &p, &x_t, t, bundle)?;
            let tgt = tape.constant(v_tgt);
            let diff = tape.sub(v_hat, tgt)?;
            let sq = tape.sqr(diff);
            let loss = tape.mean_all(sq);
            total += tape.value(loss).data()[0] as f64;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// One velocity evaluation on a fresh tape; returns the `[t, h, w, c]`
/// prediction as a tensor.
pub fn dit_forward(
    model: &DitModel,
    x_t: &Tensor,
    t: f32,
    bundle: &ConditionBundle,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let v = model.forward_t(&mut tape, &p, x_t, t, bundle)?;
    Ok(tape.value(v).clone())
}

/// Guided Euler sampling from noise to a decoded clip. The guidance scale
/// blends the conditional velocity with the null-condition one; scale 1
/// skips the extra null evaluation.
pub fn sample_video(
    model: &DitModel,
    vae: &VideoVae,
    bundle: &ConditionBundle,
    seed: u64,
) -> Result<VideoClip> {
    let sh = bundle.cam_latent.shape();
    let shape = [sh[0], sh[1], sh[2], model.cfg.latent_channels];
    let cond = bundle.normalized(model.latent_scale)?;
    cond.validate(&shape, &model.cfg)?;
    let null = cond.null_like();
    let mut r = substream(seed, "dit-sample", 0);
    let x1 = normal_tensor(&shape, &mut r);
    let s = model.cfg.cfg_scale;
    let x0 = flow::euler_sample(
        |x, t| {
            let vc = dit_forward(model, x, t, &cond)?;
            if s == 1.0 {
                return Ok(vc);
            }
            let vn = dit_forward(model, x, t, &null)?;
            flow::cfg_combine(&vc, &vn, s)
        },
        x1,
        model.cfg.sampler_steps,
    )?;
    let data = scale_tensor(&x0, model.latent_scale);
    vae_decode(
        vae,
        &LatentVideo {
            data,
            kind: LatentKind::Samples,
        },
    )
}
