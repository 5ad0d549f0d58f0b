//! Run configuration: INI-style sections with `key=value` lines.
//!
//! Sections cover the synthetic data source, both models, the sampler,
//! metrics, and run identity (seed, output directory). Unknown sections or
//! keys are hard errors so a typo cannot silently change an experiment, and
//! the resolved config can be serialized next to a run's outputs for exact
//! reproduction.

use std::path::Path;

use crate::dit::{AblationMode, DitConfig, DitTrainConfig};
use crate::error::{Error, Result};
use crate::synth::{CameraFamily, DatasetConfig, MotionFamily};
use crate::vae::VaeConfig;

/// Everything one run needs, resolved against built-in defaults.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub train_clips: usize,
    pub val_clips: usize,
    pub vae: VaeConfig,
    pub vae_steps: usize,
    pub vae_lr: f32,
    pub dit: DitConfig,
    pub dit_train: DitTrainConfig,
    pub ssim_window: usize,
    pub pose_radius: f64,
    /// Held-out clips sampled and scored by `eval`.
    pub eval_clips: usize,
    pub seed: u64,
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DatasetConfig::default(),
            train_clips: 32,
            val_clips: 8,
            vae: VaeConfig::default(),
            vae_steps: 2000,
            vae_lr: 1e-3,
            dit: DitConfig::default(),
            dit_train: DitTrainConfig::default(),
            ssim_window: 8,
            pose_radius: 4.0,
            eval_clips: 4,
            seed: 7,
            out: "out".to_string(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Parse(format!(
            "[{section}] {key} = {value}: not a valid {}",
            std::any::type_name::<T>()
        ))
    })
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Parse(format!(
            "[{section}] {key} = {value}: expected true or false"
        ))),
    }
}

fn motion_name(m: MotionFamily) -> &'static str {
    match m {
        MotionFamily::WalkCycle => "walk",
        MotionFamily::ArmWave => "wave",
        MotionFamily::Squat => "squat",
        MotionFamily::OrbitDance => "orbit",
        MotionFamily::Mixed => "mixed",
    }
}

fn camera_name(c: CameraFamily) -> &'static str {
    match c {
        CameraFamily::Static => "static",
        CameraFamily::Orbit => "orbit",
        CameraFamily::Dolly => "dolly",
        CameraFamily::Mixed => "mixed",
    }
}

impl RunConfig {
    /// Parse INI text over the defaults: `[section]` headers, `key = value`
    /// lines, `#`/`;` comments. Later keys override earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(
                    section.as_str(),
                    "synthdata" | "vae" | "dit" | "sampler" | "metrics" | "run"
                ) {
                    return Err(Error::Config(format!(
                        "line {}: unknown section [{section}]",
                        ln + 1
                    )));
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse(format!(
                    "line {}: expected key = value, got '{line}'",
                    ln + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            if section.is_empty() {
                return Err(Error::Config(format!(
                    "line {}: key '{key}' appears before any [section]",
                    ln + 1
                )));
            }
            cfg.apply(&section, key, value)?;
        }
        cfg.finalize()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let s = section;
        match (section, key) {
            ("synthdata", "width") => self.data.width = parse_num(s, key, value)?,
            ("synthdata", "height") => self.data.height = parse_num(s, key, value)?,
            ("synthdata", "frames") => self.data.frames = parse_num(s, key, value)?,
            ("synthdata", "characters") => self.data.characters = parse_num(s, key, value)?,
            ("synthdata", "train_clips") => self.train_clips = parse_num(s, key, value)?,
            ("synthdata", "val_clips") => self.val_clips = parse_num(s, key, value)?,
            ("synthdata", "motion") => {
                self.data.motion = match value {
                    "walk" => MotionFamily::WalkCycle,
                    "wave" => MotionFamily::ArmWave,
                    "squat" => MotionFamily::Squat,
                    "orbit" => MotionFamily::OrbitDance,
                    "mixed" => MotionFamily::Mixed,
                    _ => {
                        return Err(Error::Parse(format!(
                            "[synthdata] motion = {value}: expected walk, wave, squat, orbit, or mixed"
                        )))
                    }
                }
            }
            ("synthdata", "camera") => {
                self.data.camera = match value {
                    "static" => CameraFamily::Static,
                    "orbit" => CameraFamily::Orbit,
                    "dolly" => CameraFamily::Dolly,
                    "mixed" => CameraFamily::Mixed,
                    _ => {
                        return Err(Error::Parse(format!(
                            "[synthdata] camera = {value}: expected static, orbit, dolly, or mixed"
                        )))
                    }
                }
            }
            ("vae", "f_s") => self.vae.f_s = parse_num(s, key, value)?,
            ("vae", "f_t") => self.vae.f_t = parse_num(s, key, value)?,
            ("vae", "channels") => self.vae.c = parse_num(s, key, value)?,
            ("vae", "widths") => {
                self.vae.widths = value
                    .split(',')
                    .map(|v| parse_num(s, key, v.trim()))
                    .collect::<Result<_>>()?;
            }
            ("vae", "aux_width") => self.vae.aux_width = parse_num(s, key, value)?,
            ("vae", "lambda_l1") => self.vae.lambda_l1 = parse_num(s, key, value)?,
            ("vae", "lambda_p") => self.vae.lambda_p = parse_num(s, key, value)?,
            ("vae", "lambda_kl") => self.vae.lambda_kl = parse_num(s, key, value)?,
            ("vae", "lambda_reg") => self.vae.lambda_reg = parse_num(s, key, value)?,
            ("vae", "lambda_gan_2d") => self.vae.lambda_gan_2d = parse_num(s, key, value)?,
            ("vae", "lambda_gan_3d") => self.vae.lambda_gan_3d = parse_num(s, key, value)?,
            ("vae", "window") => self.vae.window = parse_num(s, key, value)?,
            ("vae", "image_prob") => self.vae.image_prob = parse_num(s, key, value)?,
            ("vae", "aug_translate_prob") => {
                self.vae.aug_translate_prob = parse_num(s, key, value)?
            }
            ("vae", "aug_speed_prob") => self.vae.aug_speed_prob = parse_num(s, key, value)?,
            ("vae", "checkpoint_every") => self.vae.checkpoint_every = parse_num(s, key, value)?,
            ("vae", "steps") => self.vae_steps = parse_num(s, key, value)?,
            ("vae", "lr") => self.vae_lr = parse_num(s, key, value)?,
            ("dit", "depth") => self.dit.depth = parse_num(s, key, value)?,
            ("dit", "d") => self.dit.d = parse_num(s, key, value)?,
            ("dit", "heads") => self.dit.heads = parse_num(s, key, value)?,
            ("dit", "points_per_body") => self.dit.points_per_body = parse_num(s, key, value)?,
            ("dit", "p_drop") => self.dit.p_drop = parse_num(s, key, value)?,
            ("dit", "identity_before_camera") => {
                self.dit.identity_before_camera = parse_bool(s, key, value)?
            }
            ("dit", "ablation") => self.dit.ablation = AblationMode::parse(value)?,
            ("dit", "steps") => self.dit_train.steps = parse_num(s, key, value)?,
            ("dit", "lr") => self.dit_train.lr = parse_num(s, key, value)?,
            ("dit", "val_every") => self.dit_train.val_every = parse_num(s, key, value)?,
            ("dit", "checkpoint_every") => {
                self.dit_train.checkpoint_every = parse_num(s, key, value)?
            }
            ("sampler", "steps") => self.dit.sampler_steps = parse_num(s, key, value)?,
            ("sampler", "cfg_scale") => self.dit.cfg_scale = parse_num(s, key, value)?,
            ("metrics", "ssim_window") => self.ssim_window = parse_num(s, key, value)?,
            ("metrics", "pose_radius") => self.pose_radius = parse_num(s, key, value)?,
            ("metrics", "eval_clips") => self.eval_clips = parse_num(s, key, value)?,
            ("run", "seed") => self.seed = parse_num(s, key, value)?,
            ("run", "out") => self.out = value.to_string(),
            _ => {
                return Err(Error::Config(format!(
                    "unknown key '{key}' in section [{section}]"
                )))
            }
        }
        Ok(())
    }

    /// Derive the cross-section fields and validate everything.
    pub fn finalize(&mut self) -> Result<()> {
        self.dit.f_t = self.vae.f_t;
        self.dit.latent_channels = self.vae.c;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        self.dit.validate()?;
        if self.train_clips == 0 {
            return Err(Error::Config("need at least one training clip".into()));
        }
        if self.data.frames < self.vae.window {
            return Err(Error::Config(format!(
                "clips of {} frames are shorter than the training window {}",
                self.data.frames, self.vae.window
            )));
        }
        if (self.data.frames - 1) % self.vae.f_t != 0 {
            return Err(Error::Config(format!(
                "clip length {} is not 1 + k * f_t (f_t = {})",
                self.data.frames, self.vae.f_t
            )));
        }
        if self.ssim_window == 0 {
            return Err(Error::Config("ssim window must be positive".into()));
        }
        if !(self.pose_radius > 0.0) {
            return Err(Error::Config("pose radius must be positive".into()));
        }
        Ok(())
    }

    /// The VAE training schedule: a single stage at the configured window.
    pub fn vae_stage(&self) -> crate::vae::TrainStage {
        crate::vae::TrainStage {
            window: self.vae.window,
            steps: self.vae_steps,
            lr: self.vae_lr,
        }
    }

    /// Canonical serialization; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let widths = self
            .vae
            .widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "[synthdata]\n\
             width = {}\nheight = {}\nframes = {}\ncharacters = {}\n\
             train_clips = {}\nval_clips = {}\nmotion = {}\ncamera = {}\n\
             \n[vae]\n\
             f_s = {}\nf_t = {}\nchannels = {}\nwidths = {}\naux_width = {}\n\
             lambda_l1 = {}\nlambda_p = {}\nlambda_kl = {}\nlambda_reg = {}\n\
             lambda_gan_2d = {}\nlambda_gan_3d = {}\nwindow = {}\n\
             image_prob = {}\naug_translate_prob = {}\naug_speed_prob = {}\n\
             checkpoint_every = {}\nsteps = {}\nlr = {}\n\
             \n[dit]\n\
             depth = {}\nd = {}\nheads = {}\npoints_per_body = {}\np_drop = {}\n\
             identity_before_camera = {}\nablation = {}\nsteps = {}\nlr = {}\n\
             val_every = {}\ncheckpoint_every = {}\n\
             \n[sampler]\nsteps = {}\ncfg_scale = {}\n\
             \n[metrics]\nssim_window = {}\npose_radius = {}\neval_clips = {}\n\
             \n[run]\nseed = {}\nout = {}\n",
            self.data.width,
            self.data.height,
            self.data.frames,
            self.data.characters,
            self.train_clips,
            self.val_clips,
            motion_name(self.data.motion),
            camera_name(self.data.camera),
            self.vae.f_s,
            self.vae.f_t,
            self.vae.c,
            widths,
            self.vae.aux_width,
            self.vae.lambda_l1,
            self.vae.lambda_p,
            self.vae.lambda_kl,
            self.vae.lambda_reg,
            self.vae.lambda_gan_2d,
            self.vae.lambda_gan_3d,
            self.vae.window,
            self.vae.image_prob,
            self.vae.aug_translate_prob,
            self.vae.aug_speed_prob,
            self.vae.checkpoint_every,
            self.vae_steps,
            self.vae_lr,
            self.dit.depth,
            self.dit.d,
            self.dit.heads,
            self.dit.points_per_body,
            self.dit.p_drop,
            self.dit.identity_before_camera,
            self.dit.ablation.tag(),
            self.dit_train.steps,
            self.dit_train.lr,
            self.dit_train.val_every,
            self.dit_train.checkpoint_every,
            self.dit.sampler_steps,
            self.dit.cfg_scale,
            self.ssim_window,
            self.pose_radius,
            self.eval_clips,
            self.seed,
            self.out,
        )
    }

    /// Write the resolved config (including the seed) beside a run's
    /// outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("resolved.cfg"), self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(parsed.to_text(), cfg.to_text());
        assert_eq!(parsed.seed, 7);
        assert_eq!(parsed.dit.f_t, parsed.vae.f_t);
        assert_eq!(parsed.dit.latent_channels, parsed.vae.c);
    }

    #[test]
    fn sparse_overrides_keep_other_defaults() {
        let cfg = RunConfig::parse(
            "# a comment\n[vae]\nf_t = 2\nchannels = 4\n\n[run]\nseed = 99\n\n[synthdata]\nframes = 33\n",
        )
        .unwrap();
        assert_eq!(cfg.vae.f_t, 2);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.data.frames, 33);
        assert_eq!(cfg.data.width, 64, "untouched keys keep defaults");
        assert_eq!(cfg.dit.f_t, 2, "derived fields follow the vae section");
        assert_eq!(cfg.dit.latent_channels, 4);
    }

    #[test]
    fn unknown_sections_and_keys_are_rejected() {
        assert!(RunConfig::parse("[nope]\nx = 1\n").is_err());
        assert!(RunConfig::parse("[vae]\nbogus = 1\n").is_err());
        assert!(RunConfig::parse("[dit]\nwidth = 64\n").is_err());
        assert!(RunConfig::parse("steps = 5\n").is_err(), "key before section");
        assert!(RunConfig::parse("[vae]\nno_equals_sign\n").is_err());
        assert!(RunConfig::parse("[vae]\nf_t = ten\n").is_err());
        assert!(RunConfig::parse("[synthdata]\nmotion = moonwalk\n").is_err());
    }

    #[test]
    fn semantic_conflicts_fail_validation() {
        // Clip length incompatible with the temporal factor.
        assert!(RunConfig::parse("[synthdata]\nframes = 18\n").is_err());
        // Window longer than the clips.
        assert!(RunConfig::parse("[vae]\nwindow = 33\n").is_err());
        // Dit width not divisible by heads.
        assert!(RunConfig::parse("[dit]\nd = 62\nheads = 4\n").is_err());
    }

    #[test]
    fn widths_parse_as_a_comma_list() {
        let cfg = RunConfig::parse("[vae]\nwidths = 4, 6\n").unwrap();
        assert_eq!(cfg.vae.widths, vec![4, 6]);
    }

    #[test]
    fn resolved_config_lands_beside_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        cfg.write_resolved(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("resolved.cfg")).unwrap();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed.to_text(), cfg.to_text());
        assert!(text.contains("seed = 7"));
    }
}
