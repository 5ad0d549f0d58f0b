//! Experiment drivers shared by the command-line interface and the test
//! suite: dataset splits, staged training runs, evaluation and sampling,
//! the latent-bias diagnostic, matched ablation studies, and a
//! finite-difference gradient audit covering every differentiable operator
//! plus the depth-one composed models.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};

use crate::attn::{isa_transformer_block, IsaBlockParams, TokenSet2D, TokenSet3D};
use crate::config::RunConfig;
use crate::dit::{
    build_condition_bundle, sample_video, train_dit, AblationMode, DitConfig, DitModel,
    DitTrainRecord,
};
use crate::error::{Error, Result};
use crate::geometry::{build_projection, CameraPose};
use crate::kernels::Conv3dSpec;
use crate::metrics::{
    append_csv_row, pose_following_score, psnr, ssim, MetricsRow, METRICS_HEADER,
};
use crate::nn::{Bound, Init, ParamStore};
use crate::rng::substream;
use crate::synth::{dataset_write, generate_dataset, write_ppm, ClipAnnotation, VideoClip};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vae::{
    last_frame_bias_diagnostic, train_vae, vae_decode, vae_encode, LatentKind, LatentVideo,
    TrainRecord, VaeConfig, VideoVae,
};

/// Final video-autoencoder checkpoint written into the run directory.
pub const VAE_CKPT: &str = "vae.ckpt";
/// Diffusion-model checkpoint written into the run directory.
pub const DIT_CKPT: &str = "dit.ckpt";

// -- dataset splits ----------------------------------------------------------

/// Train and held-out validation clips for one run.
pub struct Splits {
    pub train: Vec<(VideoClip, ClipAnnotation)>,
    pub val: Vec<(VideoClip, ClipAnnotation)>,
}

/// Seed for the validation split, mixed away from the train seed so the two
/// splits draw from disjoint generator substreams.
fn val_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1)
}

/// Generate the train and validation splits for `cfg` deterministically.
pub fn make_splits(cfg: &RunConfig) -> Result<Splits> {
    Ok(Splits {
        train: generate_dataset(&cfg.data, cfg.train_clips, cfg.seed)?,
        val: generate_dataset(&cfg.data, cfg.val_clips, val_seed(cfg.seed))?,
    })
}

/// Generate both splits and write them as PPM directories under `out`.
pub fn gen_data_run(cfg: &RunConfig, out: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    let splits = make_splits(cfg)?;
    let train_dir = out.join("data_train");
    let val_dir = out.join("data_val");
    dataset_write(&train_dir, &splits.train)?;
    dataset_write(&val_dir, &splits.val)?;
    Ok((train_dir, val_dir))
}

// -- autoencoder runs --------------------------------------------------------

/// Train the video autoencoder on explicit clips; `resume` restarts from the
/// newest checkpoint in `out` when one exists (weights and optimizer state;
/// the data stream starts over).
pub fn train_vae_with(
    cfg: &RunConfig,
    clips: &[VideoClip],
    out: &Path,
    resume: bool,
) -> Result<(VideoVae, Vec<TrainRecord>)> {
    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    let final_ckpt = out.join(VAE_CKPT);
    let stage_ckpt = out.join("vae_stage0.ckpt");
    let mut model = if resume && final_ckpt.exists() {
        VideoVae::load(&final_ckpt, cfg.vae.clone())?
    } else if resume && stage_ckpt.exists() {
        VideoVae::load(&stage_ckpt, cfg.vae.clone())?
    } else {
        VideoVae::new(cfg.vae.clone(), cfg.seed)?
    };
    let records = train_vae(&mut model, clips, &[cfg.vae_stage()], out, cfg.seed)?;
    model.save(&final_ckpt)?;
    Ok((model, records))
}

/// Generate the train split and run [`train_vae_with`] on it.
pub fn train_vae_run(
    cfg: &RunConfig,
    out: &Path,
    resume: bool,
) -> Result<(VideoVae, Vec<TrainRecord>)> {
    let splits = make_splits(cfg)?;
    let clips: Vec<VideoClip> = splits.train.into_iter().map(|(c, _)| c).collect();
    train_vae_with(cfg, &clips, out, resume)
}

/// Deterministic reconstruction through the autoencoder: encode to moments
/// and decode the means.
pub fn vae_reconstruct(model: &VideoVae, clip: &VideoClip) -> Result<VideoClip> {
    let moments = vae_encode(model, clip)?;
    let (mu, _) = moments.split_moments()?;
    vae_decode(
        model,
        &LatentVideo {
            data: mu,
            kind: LatentKind::Samples,
        },
    )
}

/// Reconstruction quality on a held-out set, next to the temporal-mean
/// baseline that replaces every frame with the clip's mean frame.
pub struct VaeEvalSummary {
    pub mean_model_psnr: f64,
    pub mean_baseline_psnr: f64,
    /// `(model, baseline)` PSNR per clip.
    pub per_clip: Vec<(f64, f64)>,
}

/// Score reconstructions of `clips` against the temporal-mean baseline.
pub fn eval_vae_reconstruction(
    model: &VideoVae,
    clips: &[(VideoClip, ClipAnnotation)],
) -> Result<VaeEvalSummary> {
    if clips.is_empty() {
        return Err(Error::InvalidArg(
            "autoencoder evaluation needs at least one clip".into(),
        ));
    }
    let mut per_clip = Vec::with_capacity(clips.len());
    for (clip, _) in clips {
        let recon = vae_reconstruct(model, clip)?;
        let model_psnr = psnr(&recon, clip)?;
        let baseline = crate::vae::temporal_mean_baseline(clip.frames())?;
        let baseline_psnr = crate::metrics::psnr_tensors(clip.frames(), &baseline)?;
        per_clip.push((model_psnr, baseline_psnr));
    }
    let n = per_clip.len() as f64;
    Ok(VaeEvalSummary {
        mean_model_psnr: per_clip.iter().map(|p| p.0).sum::<f64>() / n,
        mean_baseline_psnr: per_clip.iter().map(|p| p.1).sum::<f64>() / n,
        per_clip,
    })
}

// -- diffusion runs ----------------------------------------------------------

/// Train the diffusion model on explicit splits with a given autoencoder.
pub fn train_dit_with(
    cfg: &RunConfig,
    vae: &VideoVae,
    splits: &Splits,
    out: &Path,
    resume: bool,
) -> Result<(DitModel, Vec<DitTrainRecord>)> {
    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    let ckpt = out.join(DIT_CKPT);
    let mut model = if resume && ckpt.exists() {
        DitModel::load(&ckpt, cfg.dit.clone())?
    } else {
        DitModel::new(cfg.dit.clone(), cfg.seed)?
    };
    let records = train_dit(
        &mut model,
        vae,
        &splits.train,
        &splits.val,
        &cfg.dit_train,
        out,
        cfg.seed,
    )?;
    Ok((model, records))
}

/// Load the autoencoder from `out`, generate the splits, and train the
/// diffusion model.
pub fn train_dit_run(
    cfg: &RunConfig,
    out: &Path,
    resume: bool,
) -> Result<(DitModel, Vec<DitTrainRecord>)> {
    let vae = load_vae(cfg, out)?;
    let splits = make_splits(cfg)?;
    train_dit_with(cfg, &vae, &splits, out, resume)
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!(
            "{} not found ({hint})",
            path.display()
        )))
    }
}

/// Load the autoencoder checkpoint from the run directory.
pub fn load_vae(cfg: &RunConfig, out: &Path) -> Result<VideoVae> {
    let path = out.join(VAE_CKPT);
    require(&path, "run train-vae first")?;
    VideoVae::load(&path, cfg.vae.clone())
}

/// Load the diffusion checkpoint from the run directory.
pub fn load_dit(cfg: &RunConfig, out: &Path) -> Result<DitModel> {
    let path = out.join(DIT_CKPT);
    require(&path, "run train-dit first")?;
    DitModel::load(&path, cfg.dit.clone())
}

/// Last validation loss in a training history.
pub fn final_val_loss(records: &[DitTrainRecord]) -> Result<f64> {
    records
        .iter()
        .rev()
        .find_map(|r| r.val_loss)
        .ok_or_else(|| Error::InvalidArg("training history has no validation loss".into()))
}

/// Mean training loss over the last `k` recorded steps.
pub fn smoothed_final_loss(records: &[DitTrainRecord], k: usize) -> f64 {
    let k = k.clamp(1, records.len().max(1));
    let tail = &records[records.len().saturating_sub(k)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().map(|r| r.train_loss).sum::<f64>() / tail.len() as f64
}

// -- evaluation and sampling -------------------------------------------------

/// Sample held-out clips with the trained models and append one metrics row
/// per clip to `metrics.csv` in the run directory.
pub fn eval_run(cfg: &RunConfig, out: &Path, run_id: &str) -> Result<Vec<MetricsRow>> {
    let vae = load_vae(cfg, out)?;
    let model = load_dit(cfg, out)?;
    let splits = make_splits(cfg)?;
    let n = cfg.eval_clips.min(splits.val.len());
    if n == 0 {
        return Err(Error::InvalidArg("eval needs at least one held-out clip".into()));
    }
    let csv = out.join("metrics.csv");
    let mut rows = Vec::with_capacity(n);
    for (i, (clip, ann)) in splits.val.iter().take(n).enumerate() {
        let start = Instant::now();
        let bundle = build_condition_bundle(&vae, &model.cfg, clip, ann, cfg.seed)?;
        let generated = sample_video(&model, &vae, &bundle, cfg.seed.wrapping_add(i as u64))?;
        let row = MetricsRow {
            run_id: run_id.to_string(),
            clip_id: format!("val{i:03}"),
            psnr: psnr(&generated, clip)?,
            ssim: ssim(&generated, clip, cfg.ssim_window)?,
            pose_following: pose_following_score(&generated, ann, cfg.pose_radius)?,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        append_csv_row(&csv, METRICS_HEADER, &row.to_csv_line())?;
        rows.push(row);
    }
    Ok(rows)
}

/// Sample one held-out clip and write the generated frames (and the ground
/// truth next to them) as PPM sequences; returns the sample directory.
pub fn sample_run(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let vae = load_vae(cfg, out)?;
    let model = load_dit(cfg, out)?;
    let splits = make_splits(cfg)?;
    let (clip, ann) = splits
        .val
        .first()
        .ok_or_else(|| Error::InvalidArg("sampling needs at least one held-out clip".into()))?;
    let bundle = build_condition_bundle(&vae, &model.cfg, clip, ann, cfg.seed)?;
    let generated = sample_video(&model, &vae, &bundle, cfg.seed)?;
    let dir = out.join(format!("sample_seed{}", cfg.seed));
    std::fs::create_dir_all(&dir)?;
    for k in 0..generated.frame_count() {
        write_ppm(&dir.join(format!("frame_{k:04}.ppm")), &generated.frame(k))?;
        write_ppm(&dir.join(format!("truth_{k:04}.ppm")), &clip.frame(k))?;
    }
    Ok(dir)
}

/// Run the last-frame bias diagnostic on the train split and write the
/// per-position reconstruction profile to `latent_bias.csv`. Returns the
/// profile and the bias score (last-position PSNR minus the mean of the
/// other positions).
pub fn diagnose_run(cfg: &RunConfig, out: &Path) -> Result<(Vec<f64>, f64)> {
    let vae = load_vae(cfg, out)?;
    let splits = make_splits(cfg)?;
    let clips: Vec<VideoClip> = splits.train.into_iter().map(|(c, _)| c).collect();
    let (profile, bias) = last_frame_bias_diagnostic(&vae, &clips, cfg.vae.window)?;
    let csv = out.join("latent_bias.csv");
    for (i, p) in profile.iter().enumerate() {
        append_csv_row(&csv, "position,psnr", &format!("{i},{p}"))?;
    }
    Ok((profile, bias))
}

// -- ablation studies --------------------------------------------------------

/// One arm of the positional-encoding study.
pub struct PeArm {
    pub mode: AblationMode,
    pub seed: u64,
    pub final_val_loss: f64,
}

/// Positional-encoding study: for each seed, train one autoencoder, then
/// train three diffusion models under matched budgets that differ only in
/// the pose-conditioning mode. Appends `mode,seed,final_val_loss` rows to
/// `ablate_pe.csv` under `out`.
pub fn pe_ablation_run(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<PeArm>> {
    std::fs::create_dir_all(out)?;
    let csv = out.join("ablate_pe.csv");
    let mut arms = Vec::new();
    for &seed in seeds {
        let mut base = cfg.clone();
        base.seed = seed;
        let seed_dir = out.join(format!("seed{seed}"));
        let splits = make_splits(&base)?;
        let clips: Vec<VideoClip> = splits.train.iter().map(|(c, _)| c.clone()).collect();
        let (vae, _) = train_vae_with(&base, &clips, &seed_dir, false)?;
        for mode in [AblationMode::Ispe, AblationMode::NoPe, AblationMode::Render2d] {
            let mut arm_cfg = base.clone();
            arm_cfg.dit.ablation = mode;
            let dir = seed_dir.join(mode.tag());
            let (_, records) = train_dit_with(&arm_cfg, &vae, &splits, &dir, false)?;
            let loss = final_val_loss(&records)?;
            append_csv_row(
                &csv,
                "mode,seed,final_val_loss",
                &format!("{},{seed},{loss}", mode.tag()),
            )?;
            arms.push(PeArm {
                mode,
                seed,
                final_val_loss: loss,
            });
        }
    }
    Ok(arms)
}

/// One seed of the latent-regularization study.
pub struct RegArm {
    pub seed: u64,
    /// Last-frame bias score with the auxiliary regularizer on.
    pub bias_reg: f64,
    /// Bias score with the regularizer off.
    pub bias_noreg: f64,
    /// Smoothed final diffusion training loss with the regularizer on.
    pub dit_loss_reg: f64,
    /// Smoothed final diffusion training loss with the regularizer off.
    pub dit_loss_noreg: f64,
}

/// Latent-regularization study: per seed, train autoencoder and diffusion
/// model twice under matched budgets, with the sub-latent regularizer on and
/// off, and record the bias scores and smoothed final diffusion losses.
/// Appends rows to `ablate_reg.csv` under `out`.
pub fn reg_ablation_run(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<RegArm>> {
    if cfg.vae.lambda_reg <= 0.0 {
        return Err(Error::Config(
            "the regularization study needs lambda_reg > 0 in the base config".into(),
        ));
    }
    std::fs::create_dir_all(out)?;
    let csv = out.join("ablate_reg.csv");
    let mut arms = Vec::new();
    for &seed in seeds {
        let mut base = cfg.clone();
        base.seed = seed;
        let splits = make_splits(&base)?;
        let clips: Vec<VideoClip> = splits.train.iter().map(|(c, _)| c.clone()).collect();
        let mut results = Vec::with_capacity(2);
        for (label, lambda) in [("reg", base.vae.lambda_reg), ("noreg", 0.0)] {
            let mut arm_cfg = base.clone();
            arm_cfg.vae.lambda_reg = lambda;
            let dir = out.join(format!("seed{seed}_{label}"));
            let (vae, _) = train_vae_with(&arm_cfg, &clips, &dir, false)?;
            let (_, bias) = last_frame_bias_diagnostic(&vae, &clips, arm_cfg.vae.window)?;
            let (_, records) = train_dit_with(&arm_cfg, &vae, &splits, &dir, false)?;
            results.push((bias, smoothed_final_loss(&records, 20)));
        }
        let arm = RegArm {
            seed,
            bias_reg: results[0].0,
            bias_noreg: results[1].0,
            dit_loss_reg: results[0].1,
            dit_loss_noreg: results[1].1,
        };
        append_csv_row(
            &csv,
            "seed,bias_reg,bias_noreg,dit_loss_reg,dit_loss_noreg",
            &format!(
                "{seed},{},{},{},{}",
                arm.bias_reg, arm.bias_noreg, arm.dit_loss_reg, arm.dit_loss_noreg
            ),
        )?;
        arms.push(arm);
    }
    Ok(arms)
}

// -- gradient audit ----------------------------------------------------------

/// Relative-error tolerance for every gradient check.
pub const GRADCHECK_TOL: f64 = 1e-2;
/// Central-difference step.
pub const GRADCHECK_H: f32 = 1e-3;

/// One finished gradient check.
pub struct GradcheckEntry {
    pub name: &'static str,
    /// Worst relative error over the checked coordinates.
    pub err: f64,
}

impl GradcheckEntry {
    pub fn pass(&self) -> bool {
        self.err.is_finite() && self.err < GRADCHECK_TOL
    }
}

/// Deterministic probe tensor with entries in `[lo, hi]`.
fn probe(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut rng = substream(seed, "gradcheck", 0);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rand::Rng::gen_range(&mut rng, lo..hi))
        .collect();
    Tensor::from_vec(shape, data).expect("probe shape")
}

/// Probe tensor with magnitudes in `[0.2, 1.0]` and random signs, for
/// operators that are not differentiable at zero.
fn signed_probe(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = substream(seed, "gradcheck-sign", 0);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rand::Rng::gen_range(&mut rng, 0.2..1.0f32);
            if rand::Rng::gen::<bool>(&mut rng) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("probe shape")
}

fn op_entry<F>(name: &'static str, inputs: &[Tensor], build: F) -> Result<GradcheckEntry>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let err = sampled_fd_check(build, inputs, GRADCHECK_H, usize::MAX)?;
    Ok(GradcheckEntry { name, err })
}

/// Per-operator finite-difference checks on small, well-conditioned inputs.
pub fn gradcheck_ops(seed: u64) -> Result<Vec<GradcheckEntry>> {
    // Probes stay away from zero so no gradient coordinate sinks into the
    // f32 quantization noise of the central difference.
    let mut out = Vec::new();
    let a = signed_probe(&[3, 4], seed ^ 1);
    let b = signed_probe(&[3, 4], seed ^ 2);

    out.push(op_entry("add", &[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1])?;
        let s = t.sqr(s);
        Ok(t.sum_all(s))
    })?);
    out.push(op_entry("sub", &[a.clone(), b.clone()], |t, v| {
        let s = t.sub(v[0], v[1])?;
        let s = t.sqr(s);
        Ok(t.sum_all(s))
    })?);
    out.push(op_entry("mul", &[a.clone(), b.clone()], |t, v| {
        let s = t.mul(v[0], v[1])?;
        let s = t.sqr(s);
        Ok(t.sum_all(s))
    })?);
    out.push(op_entry("scale_shift", &[a.clone()], |t, v| {
        let s = t.scale(v[0], 1.7);
        let s = t.add_scalar(s, 0.3);
        let s = t.sqr(s);
        Ok(t.sum_all(s))
    })?);
    out.push(op_entry("gelu", &[a.clone()], |t, v| {
        let s = t.gelu(v[0]);
        let s = t.sqr(s);
        Ok(t.sum_all(s))
    })?);
    out.push(op_entry("sqr", &[a.clone()], |t, v| {
        let s = t.sqr(v[0]);
        let s = t.sqr(s);
        Ok(t.sum_all(s))
    })?);
    out.push(op_entry("sqrt", &[probe(&[3, 4], seed ^ 3, 0.5, 2.0)], |t, v| {
        let s = t.sqrt(v[0]);
        Ok(t.sum_all(s))
    })?);
    out.push(op_entry("exp", &[a.clone()], |t, v| {
        let s = t.exp(v[0]);
        Ok(t.sum_all(s))
    })?);
    out.push(op_entry("abs", &[signed_probe(&[3, 4], seed ^ 4)], |t, v| {
        let s = t.abs(v[0]);
        let s = t.sqr(s);
        Ok(t.sum_all(s))
    })?);
    out.push(op_entry("mean_all", &[a.clone()], |t, v| {
        let s = t.sqr(v[0]);
        Ok(t.mean_all(s))
    })?);
    out.push(op_entry(
        "matmul",
        &[signed_probe(&[4, 5], seed ^ 5), signed_probe(&[5, 3], seed ^ 6)],
        |t, v| {
            let s = t.matmul(v[0], v[1])?;
            let s = t.sqr(s);
            Ok(t.sum_all(s))
        },
    )?);
    out.push(op_entry(
        "matmul_nt",
        &[signed_probe(&[4, 5], seed ^ 7), signed_probe(&[3, 5], seed ^ 8)],
        |t, v| {
            let s = t.matmul_nt(v[0], v[1])?;
            let s = t.sqr(s);
            Ok(t.sum_all(s))
        },
    )?);
    out.push(op_entry(
        "layer_norm",
        &[
            probe(&[5, 8], seed ^ 9, -1.0, 1.0),
            probe(&[8], seed ^ 10, 0.8, 1.2),
            probe(&[8], seed ^ 11, -0.2, 0.2),
        ],
        |t, v| {
            let s = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let s = t.sqr(s);
            Ok(t.sum_all(s))
        },
    )?);
    out.push(op_entry(
        "softmax",
        &[probe(&[4, 6], seed ^ 12, -1.0, 1.0), signed_probe(&[4, 6], seed ^ 13)],
        |t, v| {
            let s = t.softmax(v[0], 1)?;
            let s = t.mul(s, v[1])?;
            let s = t.sqr(s);
            Ok(t.sum_all(s))
        },
    )?);
    out.push(op_entry(
        "attention",
        &[
            signed_probe(&[5, 8], seed ^ 14),
            signed_probe(&[7, 8], seed ^ 15),
            signed_probe(&[7, 8], seed ^ 16),
        ],
        |t, v| {
            let s = t.attention(v[0], v[1], v[2], 0.3536)?;
            let s = t.sqr(s);
            Ok(t.sum_all(s))
        },
    )?);
    let spec = Conv3dSpec {
        kt: 2,
        kh: 3,
        kw: 3,
        c_in: 2,
        c_out: 3,
        st: 1,
        sh: 2,
        sw: 2,
    };
    out.push(op_entry(
        "conv3d",
        &[
            signed_probe(&[3, 4, 4, 2], seed ^ 17),
            signed_probe(&[2, 3, 3, 2, 3], seed ^ 18),
            probe(&[3], seed ^ 19, -0.2, 0.2),
        ],
        move |t, v| {
            let s = t.conv3d(v[0], v[1], v[2], spec)?;
            let s = t.sqr(s);
            Ok(t.sum_all(s))
        },
    )?);
    // Sample points away from texel-boundary kinks by more than the probe step.
    let coords =
        Tensor::from_vec(&[3, 2], vec![0.6, 1.3, 2.4, 0.2, -2.0, 7.0]).expect("coords shape");
    out.push(op_entry("grid_sample", &[signed_probe(&[4, 5, 3], seed ^ 20)], move |t, v| {
        let s = t.grid_sample(v[0], &coords)?;
        let s = t.sqr(s);
        Ok(t.sum_all(s))
    })?);
    out.push(op_entry("reshape_permute", &[signed_probe(&[2, 3, 4], seed ^ 21)], |t, v| {
        let s = t.permute(v[0], &[2, 0, 1])?;
        let s = t.reshape(s, &[4, 6])?;
        let s = t.sqr(s);
        Ok(t.sum_all(s))
    })?);
    out.push(op_entry("slice_concat", &[signed_probe(&[4, 6], seed ^ 22)], |t, v| {
        let head = t.slice(v[0], 0, 0, 2)?;
        let tail = t.slice(v[0], 0, 1, 3)?;
        let s = t.concat(&[head, tail], 0)?;
        let s = t.sqr(s);
        Ok(t.sum_all(s))
    })?);
    Ok(out)
}

/// Central-difference check over up to `per_tensor` coordinates per input
/// (the strongest-gradient entry plus an even stride; pass `usize::MAX` for
/// every coordinate), skipping coordinates whose gradient sits below the
/// f32 noise floor of the difference itself. Returns the worst relative
/// error over the verifiable coordinates.
fn sampled_fd_check<F>(build: F, inputs: &[Tensor], h: f32, per_tensor: usize) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0] as f64)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Shape("gradient check: loss must be scalar".into()));
    }
    let base = tape.value(loss).data()[0] as f64;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();

    // Each f32 loss evaluation carries rounding noise of a few ulps, so the
    // central difference has an uncertainty of about
    // `NOISE_ULPS * ulp(loss) / (2h)` in gradient units. A coordinate can
    // only be certified to the relative tolerance when its gradient exceeds
    // that uncertainty divided by the tolerance; smaller coordinates are
    // unverifiable at this precision and step size, and exact operator
    // oracles cover them instead.
    const NOISE_ULPS: f64 = 8.0;
    let floor =
        NOISE_ULPS * base.abs().max(1e-3) * (f32::EPSILON as f64) / (2.0 * h as f64 * GRADCHECK_TOL);

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        if n == 0 {
            continue;
        }
        let gdata = analytic[ti].data();
        let mut idx: Vec<usize> = Vec::new();
        let amax = (0..n)
            .max_by(|&x, &y| {
                gdata[x]
                    .abs()
                    .partial_cmp(&gdata[y].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(0);
        idx.push(amax);
        let k = per_tensor.clamp(1, n);
        for s in 0..k {
            idx.push(s * n / k);
        }
        idx.sort_unstable();
        idx.dedup();
        for &j in &idx {
            let x0 = input.data()[j];
            let (xp, xm) = (x0 + h, x0 - h);
            let delta = (xp - xm) as f64;
            if delta == 0.0 {
                continue;
            }
            work[ti].data_mut()[j] = xp;
            let fp = eval(&work)?;
            work[ti].data_mut()[j] = xm;
            let fm = eval(&work)?;
            work[ti].data_mut()[j] = x0;
            let fd = (fp - fm) / delta;
            let g = gdata[j] as f64;
            if g.abs().max(fd.abs()) <= floor {
                continue;
            }
            let rel = (g - fd).abs() / g.abs().max(fd.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Replace a zero-initialized parameter with small random values so that
/// gradients can flow around it at the check point (residual output layers
/// start at zero by design; the transient would otherwise hide upstream
/// connectivity from a one-point check).
fn nudge(store: &mut ParamStore, name: &str, seed: u64) {
    let shape = store.get(name).expect("nudge target exists").shape().to_vec();
    let mut tmp = ParamStore::new();
    let mut rng = substream(seed, "gradcheck-nudge", 0);
    tmp.register("tmp", &shape, Init::Normal(0.05), &mut rng);
    store.set(name, tmp.get("tmp").expect("registered").clone());
}

fn store_leaves(store: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    let tensors = names
        .iter()
        .map(|n| store.get(n).expect("listed name exists").clone())
        .collect();
    (names, tensors)
}

fn isa_block_entry(seed: u64) -> Result<GradcheckEntry> {
    let mut store = ParamStore::new();
    let mut rng = substream(seed, "gradcheck-isa", 0);
    let params = IsaBlockParams::new(&mut store, &mut rng, "ib", 6, 2)?;
    nudge(&mut store, "ib.ffnz.f2.w", seed ^ 0x51);
    nudge(&mut store, "ib.ffny.f2.w", seed ^ 0x52);
    let cam = CameraPose::look_at(
        [0.0, 1.0, -3.0],
        [0.0, 0.9, 0.0],
        [0.0, 1.0, 0.0],
        (17.6, 17.6, 8.0, 8.0),
        0.1,
        100.0,
    )?;
    let proj = build_projection(&cam, 16, 16)?;
    let z_coords = vec![(0.5, 0.5), (1.5, 0.5)];
    let y_coords = vec![[0.1, 0.9, 0.2], [0.0, 1.2, 0.1], [0.2, 0.5, 0.3]];
    let y_frames = vec![1, 2, 3];
    let y_persons = vec![0, 0, 0];

    let (names, mut inputs) = store_leaves(&store);
    inputs.insert(0, probe(&[3, 6], seed ^ 0x53, -1.0, 1.0));
    inputs.insert(0, probe(&[2, 6], seed ^ 0x54, -1.0, 1.0));
    let err = sampled_fd_check(
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
                coords: y_coords.clone(),
                frames: y_frames.clone(),
                persons: y_persons.clone(),
            };
            let (z2, y2) = isa_transformer_block(tape, &bound, &params, &z, &y, &proj)?;
            let zs = tape.sqr(z2);
            let ys = tape.sqr(y2);
            let zl = tape.sum_all(zs);
            let yl = tape.sum_all(ys);
            tape.add(zl, yl)
        },
        &inputs,
        GRADCHECK_H,
        16,
    )?;
    Ok(GradcheckEntry {
        name: "isa_block",
        err,
    })
}

fn tiny_vae_cfg() -> VaeConfig {
    VaeConfig {
        f_s: 4,
        f_t: 2,
        c: 4,
        widths: vec![4, 6],
        aux_width: 4,
        window: 5,
        ..VaeConfig::default()
    }
}

fn vae_step_entry(seed: u64) -> Result<GradcheckEntry> {
    let cfg = tiny_vae_cfg();
    let model = VideoVae::new(cfg.clone(), seed)?;
    let window = probe(&[5, 8, 8, 3], seed ^ 0x61, 0.0, 1.0);
    let eps = {
        let mut rng = substream(seed, "gradcheck-eps", 0);
        let data: Vec<f32> = (0..3 * 2 * 2 * 4).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(&[3, 2, 2, 4], data)?
    };
    let (names, inputs) = store_leaves(&model.store);
    let err = sampled_fd_check(
        |tape, vars| {
            let mut p = Bound::default();
            for (n, v) in names.iter().zip(vars) {
                p.insert(n, *v);
            }
            let x = tape.constant(window.clone());
            let moments = model.encode_t(tape, &p, x)?;
            let mu = tape.slice(moments, 3, 0, cfg.c)?;
            let lv = tape.slice(moments, 3, cfg.c, cfg.c)?;
            let e = tape.constant(eps.clone());
            let half_lv = tape.scale(lv, 0.5);
            let std = tape.exp(half_lv);
            let noise = tape.mul(std, e)?;
            let z = tape.add(mu, noise)?;
            let recon = model.decode_t(tape, &p, z)?;
            let diff = tape.sub(x, recon)?;
            let absdiff = tape.abs(diff);
            let l1 = tape.mean_all(absdiff);
            let mu2 = tape.sqr(mu);
            let var = tape.exp(lv);
            let sum = tape.add(mu2, var)?;
            let sum = tape.add_scalar(sum, -1.0);
            let sum = tape.sub(sum, lv)?;
            let kl_mean = tape.mean_all(sum);
            let kl = tape.scale(kl_mean, 0.5);
            let t1 = tape.shape(moments)[0];
            let (h, w) = (tape.shape(moments)[1], tape.shape(moments)[2]);
            let cs = cfg.c / cfg.f_t;
            let z_tail = tape.slice(z, 0, 1, t1 - 1)?;
            let grouped = tape.reshape(z_tail, &[t1 - 1, h, w, cfg.f_t, cs])?;
            let ordered = tape.permute(grouped, &[0, 3, 1, 2, 4])?;
            let stacked = tape.reshape(ordered, &[(t1 - 1) * cfg.f_t, h, w, cs])?;
            let aux = model.aux_decode_t(tape, &p, stacked)?;
            let target = tape.slice(x, 0, 1, 4)?;
            let adiff = tape.sub(target, aux)?;
            let aabs = tape.abs(adiff);
            let reg = tape.mean_all(aabs);
            let wl1 = tape.scale(l1, cfg.lambda_l1);
            let wkl = tape.scale(kl, cfg.lambda_kl);
            let wreg = tape.scale(reg, cfg.lambda_reg);
            let partial = tape.add(wl1, wkl)?;
            tape.add(partial, wreg)
        },
        &inputs,
        GRADCHECK_H,
        6,
    )?;
    Ok(GradcheckEntry {
        name: "vae_step",
        err,
    })
}

fn dit_step_entry(seed: u64) -> Result<GradcheckEntry> {
    let vae = VideoVae::new(tiny_vae_cfg(), seed)?;
    let dit_cfg = DitConfig {
        depth: 1,
        d: 12,
        heads: 2,
        f_t: 2,
        latent_channels: 4,
        points_per_body: 6,
        sampler_steps: 2,
        ..DitConfig::default()
    };
    let data = generate_dataset(
        &crate::synth::DatasetConfig {
            width: 16,
            height: 16,
            frames: 5,
            characters: 1,
            ..crate::synth::DatasetConfig::default()
        },
        1,
        seed,
    )?;
    let (clip, ann) = &data[0];
    let bundle = build_condition_bundle(&vae, &dit_cfg, clip, ann, seed)?;
    let mut model = DitModel::new(dit_cfg, seed)?;
    let nudge_names: Vec<String> = model
        .store
        .names()
        .filter(|n| n.ends_with(".f2.w") || *n == "head.out.w")
        .map(|s| s.to_string())
        .collect();
    for (i, n) in nudge_names.iter().enumerate() {
        nudge(&mut model.store, n, seed ^ (0x70 + i as u64));
    }
    let x_t = probe(&[3, 4, 4, 4], seed ^ 0x62, -1.0, 1.0);
    let target = probe(&[3, 4, 4, 4], seed ^ 0x63, -1.0, 1.0);
    let (names, inputs) = store_leaves(&model.store);
    let err = sampled_fd_check(
        |tape, vars| {
            let mut p = Bound::default();
            for (n, v) in names.iter().zip(vars) {
                p.insert(n, *v);
            }
            let v = model.forward_t(tape, &p, &x_t, 0.4, &bundle)?;
            let tgt = tape.constant(target.clone());
            let diff = tape.sub(v, tgt)?;
            let sq = tape.sqr(diff);
            Ok(tape.mean_all(sq))
        },
        &inputs,
        GRADCHECK_H,
        4,
    )?;
    Ok(GradcheckEntry {
        name: "dit_step",
        err,
    })
}

/// Depth-one composed-model checks: the symmetric interspatial block, one
/// autoencoder training loss, and one diffusion training loss, each against
/// central differences over sampled coordinates.
pub fn gradcheck_composed(seed: u64) -> Result<Vec<GradcheckEntry>> {
    Ok(vec![
        isa_block_entry(seed)?,
        vae_step_entry(seed)?,
        dit_step_entry(seed)?,
    ])
}

/// The full gradient audit: every operator plus the composed models.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradcheckEntry>> {
    let mut out = gradcheck_ops(seed)?;
    out.extend(gradcheck_composed(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::dit::DitTrainConfig;
    use tempfile::tempdir;

    fn tiny_run_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.width = 16;
        cfg.data.height = 16;
        cfg.data.frames = 5;
        cfg.data.characters = 1;
        cfg.train_clips = 2;
        cfg.val_clips = 1;
        cfg.eval_clips = 1;
        cfg.vae = tiny_vae_cfg();
        cfg.vae_steps = 2;
        cfg.dit = DitConfig {
            depth: 1,
            d: 12,
            heads: 2,
            f_t: 2,
            latent_channels: 4,
            points_per_body: 6,
            sampler_steps: 2,
            ..DitConfig::default()
        };
        cfg.dit_train = DitTrainConfig {
            steps: 2,
            lr: 1e-3,
            val_every: 1,
            checkpoint_every: 0,
        };
        cfg.seed = 5;
        cfg
    }

    #[test]
    fn splits_draw_from_disjoint_streams() {
        let cfg = tiny_run_cfg();
        let splits = make_splits(&cfg).unwrap();
        assert_eq!(splits.train.len(), 2);
        assert_eq!(splits.val.len(), 1);
        assert_ne!(
            splits.train[0].0.frames().data(),
            splits.val[0].0.frames().data()
        );
    }

    #[test]
    fn operator_gradients_match_central_differences() {
        let entries = gradcheck_ops(11).unwrap();
        assert!(entries.len() >= 18);
        for e in &entries {
            assert!(e.pass(), "{} failed with error {}", e.name, e.err);
        }
    }

    #[test]
    #[ignore = "minutes-long; the acceptance suite runs it with a time budget"]
    fn composed_model_gradients_match_central_differences() {
        for e in gradcheck_composed(11).unwrap() {
            assert!(e.pass(), "{} failed with error {}", e.name, e.err);
        }
    }

    #[test]
    fn pipeline_runs_end_to_end_at_toy_scale() {
        let cfg = tiny_run_cfg();
        let dir = tempdir().unwrap();
        let out = dir.path();

        let (_, records) = train_vae_run(&cfg, out, false).unwrap();
        assert_eq!(records.len(), cfg.vae_steps);
        assert!(out.join(VAE_CKPT).exists());
        assert!(out.join("resolved.cfg").exists());

        let summary = {
            let vae = load_vae(&cfg, out).unwrap();
            let splits = make_splits(&cfg).unwrap();
            eval_vae_reconstruction(&vae, &splits.val).unwrap()
        };
        assert_eq!(summary.per_clip.len(), 1);
        assert!(summary.mean_model_psnr.is_finite());
        assert!(summary.mean_baseline_psnr.is_finite());

        let (_, dit_records) = train_dit_run(&cfg, out, false).unwrap();
        assert_eq!(dit_records.len(), cfg.dit_train.steps);
        assert!(out.join(DIT_CKPT).exists());
        assert!(final_val_loss(&dit_records).unwrap().is_finite());

        let rows = eval_run(&cfg, out, "toy").unwrap();
        assert_eq!(rows.len(), 1);
        let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert!(csv.starts_with(METRICS_HEADER));
        assert_eq!(csv.lines().count(), 2);

        let sample_dir = sample_run(&cfg, out).unwrap();
        assert!(sample_dir.join("frame_0000.ppm").exists());
        assert!(sample_dir.join("truth_0004.ppm").exists());

        let (profile, bias) = diagnose_run(&cfg, out).unwrap();
        assert_eq!(profile.len(), cfg.vae.f_t);
        assert!(bias.is_finite());
        assert!(out.join("latent_bias.csv").exists());

        // Resuming restarts from the saved weights without erroring.
        let (_, resumed) = train_vae_run(&cfg, out, true).unwrap();
        assert_eq!(resumed.len(), cfg.vae_steps);
        let (_, resumed_dit) = train_dit_run(&cfg, out, true).unwrap();
        assert_eq!(resumed_dit.len(), cfg.dit_train.steps);
    }

    #[test]
    fn missing_checkpoints_are_reported_before_work_starts() {
        let cfg = tiny_run_cfg();
        let dir = tempdir().unwrap();
        let err = eval_run(&cfg, dir.path(), "x").unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }
}
