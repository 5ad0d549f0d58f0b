//! Reconstruction and controllability metrics (PSNR, SSIM, pose-following)
//! plus the append-only CSV plumbing used by training and evaluation runs.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::body::Skeleton;
use crate::error::{Error, Result};
use crate::synth::{body_centroid, ClipAnnotation, VideoClip};
use crate::tensor::Tensor;

/// PSNR reported for identical inputs (and an upper cap in general).
pub const PSNR_CAP: f64 = 99.0;

/// Deterministic two-level mean of squared differences in f64.
fn mse(a: &[f32], b: &[f32]) -> f64 {
    const CHUNK: usize = 1024;
    let mut total = 0.0f64;
    for (ca, cb) in a.chunks(CHUNK).zip(b.chunks(CHUNK)) {
        let mut part = 0.0f64;
        for (x, y) in ca.iter().zip(cb) {
            let d = (*x - *y) as f64;
            part += d * d;
        }
        total += part;
    }
    total / a.len() as f64
}

/// Peak signal-to-noise ratio in dB between equal-shape tensors with unit
/// peak value: `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr_tensors(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "psnr: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.numel() == 0 {
        return Err(Error::InvalidArg("psnr: empty tensors".into()));
    }
    let m = mse(a.data(), b.data());
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// PSNR between two clips of equal shape.
pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    psnr_tensors(a.frames(), b.frames())
}

/// Standard SSIM constants at unit dynamic range.
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Summed-area table over an `h`×`w` channel plane: `sat[v][u]` holds the sum
/// over the rectangle `[0, v) x [0, u)`.
fn summed_area(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
    for v in 0..h {
        for u in 0..w {
            sat[(v + 1) * (w + 1) + (u + 1)] = plane[v * w + u]
                + sat[v * (w + 1) + (u + 1)]
                + sat[(v + 1) * (w + 1) + u]
                - sat[v * (w + 1) + u];
        }
    }
    sat
}

fn window_sum(sat: &[f64], w: usize, v: usize, u: usize, win: usize) -> f64 {
    let s = w + 1;
    sat[(v + win) * s + (u + win)] - sat[v * s + (u + win)] - sat[(v + win) * s + u]
        + sat[v * s + u]
}

/// Mean structural similarity between two clips: per frame and channel, local
/// SSIM over all `window`×`window` sliding positions (stride 1, uniform
/// weights, population statistics), averaged over everything.
pub fn ssim(a: &VideoClip, b: &VideoClip, window: usize) -> Result<f64> {
    if a.frames().shape() != b.frames().shape() {
        return Err(Error::Shape(format!(
            "ssim: shape mismatch {:?} vs {:?}",
            a.frames().shape(),
            b.frames().shape()
        )));
    }
    let (f, h, w) = (a.frame_count(), a.height(), a.width());
    if window == 0 || h < window || w < window {
        return Err(Error::InvalidArg(format!(
            "ssim: {h}x{w} frames are smaller than the {window}x{window} window"
        )));
    }
    let n = (window * window) as f64;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for k in 0..f {
        for ch in 0..3 {
            let mut pa = vec![0.0f64; h * w];
            let mut pb = vec![0.0f64; h * w];
            for v in 0..h {
                for u in 0..w {
                    pa[v * w + u] = a.frames().at(&[k, v, u, ch]) as f64;
                    pb[v * w + u] = b.frames().at(&[k, v, u, ch]) as f64;
                }
            }
            let paa: Vec<f64> = pa.iter().map(|x| x * x).collect();
            let pbb: Vec<f64> = pb.iter().map(|x| x * x).collect();
            let pab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
            let sa = summed_area(&pa, h, w);
            let sb = summed_area(&pb, h, w);
            let saa = summed_area(&paa, h, w);
            let sbb = summed_area(&pbb, h, w);
            let sab = summed_area(&pab, h, w);
            for v in 0..=(h - window) {
                for u in 0..=(w - window) {
                    let mu_a = window_sum(&sa, w, v, u, window) / n;
                    let mu_b = window_sum(&sb, w, v, u, window) / n;
                    let var_a = window_sum(&saa, w, v, u, window) / n - mu_a * mu_a;
                    let var_b = window_sum(&sbb, w, v, u, window) / n - mu_b * mu_b;
                    let cov = window_sum(&sab, w, v, u, window) / n - mu_a * mu_b;
                    let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
                    let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
                    total += num / den;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Background-difference threshold that defines the foreground mask.
pub const FOREGROUND_THRESHOLD: f32 = 0.1;
/// Default centroid tolerance in pixels (chosen for 64x64 frames).
pub const POSE_FOLLOW_RADIUS: f64 = 4.0;

/// Fraction of frames whose foreground centroid (pixels differing from the
/// annotated background by more than [`FOREGROUND_THRESHOLD`] in any channel)
/// lies within `radius` pixels of the projected annotated body centroid.
/// Frames without foreground count as misses. Assumes the built-in humanoid.
pub fn pose_following_score(
    generated: &VideoClip,
    ann: &ClipAnnotation,
    radius: f64,
) -> Result<f64> {
    let f = generated.frame_count();
    if ann.cameras.len() != f || ann.poses.len() != f {
        return Err(Error::InvalidArg(format!(
            "pose_following_score: annotation covers {} frames, clip has {f}",
            ann.cameras.len()
        )));
    }
    let (h, w) = (generated.height(), generated.width());
    let skel = Skeleton::humanoid();
    let mut hits = 0usize;
    for k in 0..f {
        let (mut su, mut sv, mut count) = (0.0f64, 0.0f64, 0usize);
        for v in 0..h {
            for u in 0..w {
                let bg = ann.background.pixel(u, v, w, h);
                let fg = (0..3)
                    .any(|c| (generated.frames().at(&[k, v, u, c]) - bg[c]).abs() > FOREGROUND_THRESHOLD);
                if fg {
                    su += u as f64 + 0.5;
                    sv += v as f64 + 0.5;
                    count += 1;
                }
            }
        }
        if count == 0 {
            continue;
        }
        let centroid = (su / count as f64, sv / count as f64);
        // Combined target: mean of the per-character body centroids.
        let mut target = [0.0f64; 3];
        for pose in &ann.poses[k] {
            let c = body_centroid(&skel, pose)?;
            target = crate::geometry::add3(target, c);
        }
        let target = crate::geometry::scale3(target, 1.0 / ann.poses[k].len() as f64);
        let (pu, pv, depth) = ann.cameras[k].project_pixel(target);
        if depth <= 0.0 {
            continue;
        }
        let (dx, dy) = (centroid.0 - pu, centroid.1 - pv);
        if (dx * dx + dy * dy).sqrt() <= radius {
            hits += 1;
        }
    }
    Ok(hits as f64 / f as f64)
}

/// Per-character controllability. Each foreground pixel is assigned to the
/// character whose projected body centroid is nearest, and a character scores
/// a hit in a frame when the centroid of its assigned pixels lies within
/// `radius` pixels of its own projection. A character with no assigned pixels
/// (or projected behind the camera) misses that frame. Returns one score in
/// `[0, 1]` per character, in annotation order.
pub fn per_character_pose_scores(
    generated: &VideoClip,
    ann: &ClipAnnotation,
    radius: f64,
) -> Result<Vec<f64>> {
    let f = generated.frame_count();
    if ann.cameras.len() != f || ann.poses.len() != f {
        return Err(Error::InvalidArg(format!(
            "per_character_pose_scores: annotation covers {} frames, clip has {f}",
            ann.cameras.len()
        )));
    }
    let chars = ann.poses.first().map_or(0, Vec::len);
    if chars == 0 {
        return Ok(Vec::new());
    }
    let (h, w) = (generated.height(), generated.width());
    let skel = Skeleton::humanoid();
    let mut hits = vec![0usize; chars];
    for k in 0..f {
        if ann.poses[k].len() != chars {
            return Err(Error::InvalidArg(format!(
                "per_character_pose_scores: frame {k} has {} characters, expected {chars}",
                ann.poses[k].len()
            )));
        }
        let mut targets = Vec::with_capacity(chars);
        for pose in &ann.poses[k] {
            let c = body_centroid(&skel, pose)?;
            let (pu, pv, depth) = ann.cameras[k].project_pixel(c);
            targets.push((depth > 0.0).then_some((pu, pv)));
        }
        let mut acc = vec![(0.0f64, 0.0f64, 0usize); chars];
        for v in 0..h {
            for u in 0..w {
                let bg = ann.background.pixel(u, v, w, h);
                let fg = (0..3)
                    .any(|c| (generated.frames().at(&[k, v, u, c]) - bg[c]).abs() > FOREGROUND_THRESHOLD);
                if !fg {
                    continue;
                }
                let (px, py) = (u as f64 + 0.5, v as f64 + 0.5);
                let mut best: Option<(usize, f64)> = None;
                for (i, target) in targets.iter().enumerate() {
                    if let Some((tu, tv)) = target {
                        let d2 = (px - tu) * (px - tu) + (py - tv) * (py - tv);
                        if best.is_none_or(|(_, b)| d2 < b) {
                            best = Some((i, d2));
                        }
                    }
                }
                if let Some((i, _)) = best {
                    acc[i].0 += px;
                    acc[i].1 += py;
                    acc[i].2 += 1;
                }
            }
        }
        for i in 0..chars {
            let (su, sv, n) = acc[i];
            let Some((tu, tv)) = targets[i] else { continue };
            if n == 0 {
                continue;
            }
            let (cx, cy) = (su / n as f64, sv / n as f64);
            if ((cx - tu) * (cx - tu) + (cy - tv) * (cy - tv)).sqrt() <= radius {
                hits[i] += 1;
            }
        }
    }
    Ok(hits.iter().map(|&n| n as f64 / f as f64).collect())
}

// -- CSV plumbing ------------------------------------------------------------

/// One evaluation row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub clip_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub pose_following: f64,
    pub wall_time_s: f64,
}

pub const METRICS_HEADER: &str = "run_id,clip_id,psnr,ssim,pose_following,wall_time_s";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.run_id, self.clip_id, self.psnr, self.ssim, self.pose_following, self.wall_time_s
        )
    }
}

/// Append one row to a CSV file, writing `header` first if the file is new
/// or empty. Append-only: existing rows are never rewritten.
pub fn append_csv_row(path: &Path, header: &str, row: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let need_header = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if need_header {
        writeln!(file, "{header}")?;
    }
    writeln!(file, "{row}")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{
        generate_dataset, render_frame, CameraFamily, DatasetConfig, MotionFamily,
    };
    use crate::rng::substream;
    use rand::Rng;

    fn clip_of(shape: &[usize], fill: impl FnMut(usize) -> f32) -> VideoClip {
        let n: usize = shape.iter().product();
        VideoClip::new(Tensor::from_vec(shape, (0..n).map(fill).collect()).unwrap()).unwrap()
    }

    #[test]
    fn psnr_formula_and_cap() {
        let a = clip_of(&[2, 8, 8, 3], |_| 0.2);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);

        let b = clip_of(&[2, 8, 8, 3], |_| 0.3);
        let got = psnr(&a, &b).unwrap();
        assert!((got - 20.0).abs() < 1e-4, "MSE 0.01 should give 20 dB, got {got}");

        let zero = clip_of(&[2, 8, 8, 3], |_| 0.0);
        let one = clip_of(&[2, 8, 8, 3], |_| 1.0);
        let got = psnr(&zero, &one).unwrap();
        assert!(got.abs() < 1e-9, "MSE 1 should give 0 dB, got {got}");
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = clip_of(&[1, 8, 8, 3], |_| 0.5);
        let b = clip_of(&[2, 8, 8, 3], |_| 0.5);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_identity_and_direction() {
        let mut rng = substream(3, "ssim-test", 0);
        let a = clip_of(&[2, 12, 12, 3], |_| rng.gen_range(0.0..1.0));
        assert!((ssim(&a, &a, 8).unwrap() - 1.0).abs() < 1e-12);

        let inverted = VideoClip::new(a.frames().map(|x| 1.0 - x)).unwrap();
        assert!(ssim(&a, &inverted, 8).unwrap() < 1.0);
    }

    #[test]
    fn ssim_rejects_frames_smaller_than_window() {
        let a = clip_of(&[1, 6, 6, 3], |_| 0.5);
        assert!(ssim(&a, &a, 8).is_err());
    }

    /// Direct per-window SSIM, no summed-area tables.
    fn ssim_direct(a: &VideoClip, b: &VideoClip, window: usize) -> f64 {
        let (f, h, w) = (a.frame_count(), a.height(), a.width());
        let n = (window * window) as f64;
        let mut total = 0.0;
        let mut count = 0usize;
        for k in 0..f {
            for ch in 0..3 {
                for v in 0..=(h - window) {
                    for u in 0..=(w - window) {
                        let (mut sa, mut sb, mut saa, mut sbb, mut sab) =
                            (0.0f64, 0.0, 0.0, 0.0, 0.0);
                        for dv in 0..window {
                            for du in 0..window {
                                let x = a.frames().at(&[k, v + dv, u + du, ch]) as f64;
                                let y = b.frames().at(&[k, v + dv, u + du, ch]) as f64;
                                sa += x;
                                sb += y;
                                saa += x * x;
                                sbb += y * y;
                                sab += x * y;
                            }
                        }
                        let (mu_a, mu_b) = (sa / n, sb / n);
                        let var_a = saa / n - mu_a * mu_a;
                        let var_b = sbb / n - mu_b * mu_b;
                        let cov = sab / n - mu_a * mu_b;
                        let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
                        let den =
                            (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
                        total += num / den;
                        count += 1;
                    }
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_direct_formula_oracle() {
        let mut rng = substream(9, "ssim-oracle", 0);
        let a = clip_of(&[2, 16, 16, 3], |_| rng.gen_range(0.0..1.0));
        let b = clip_of(&[2, 16, 16, 3], |_| rng.gen_range(0.0..1.0));
        let fast = ssim(&a, &b, 8).unwrap();
        let direct = ssim_direct(&a, &b, 8);
        assert!((fast - direct).abs() < 1e-6, "sat {fast} vs direct {direct}");
    }

    #[test]
    fn rendered_clip_follows_its_own_annotation() {
        let config = DatasetConfig {
            motion: MotionFamily::WalkCycle,
            camera: CameraFamily::Orbit,
            frames: 17,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&config, 2, 31).unwrap();
        for (clip, ann) in &data {
            let score = pose_following_score(clip, ann, POSE_FOLLOW_RADIUS).unwrap();
            assert!(score >= 0.99, "self-consistency score {score}");
        }
    }

    #[test]
    fn all_background_clip_scores_zero() {
        let config = DatasetConfig {
            frames: 5,
            width: 32,
            height: 32,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&config, 1, 5).unwrap();
        let (clip, ann) = &data[0];
        let mut frames = Vec::new();
        for cam in &ann.cameras {
            let bg = render_frame(&[], cam, &ann.background, clip.width(), clip.height()).unwrap();
            frames.extend_from_slice(bg.data());
        }
        let bg_clip = VideoClip::new(
            Tensor::from_vec(&[clip.frame_count(), clip.height(), clip.width(), 3], frames).unwrap(),
        )
        .unwrap();
        let score = pose_following_score(&bg_clip, ann, POSE_FOLLOW_RADIUS).unwrap();
        assert_eq!(score, 0.0);
        let per = per_character_pose_scores(&bg_clip, ann, POSE_FOLLOW_RADIUS).unwrap();
        assert_eq!(per, vec![0.0]);
    }

    #[test]
    fn per_character_scores_match_the_combined_score_for_one_character() {
        let config = DatasetConfig {
            motion: MotionFamily::ArmWave,
            camera: CameraFamily::Static,
            frames: 9,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&config, 1, 11).unwrap();
        let (clip, ann) = &data[0];
        let combined = pose_following_score(clip, ann, POSE_FOLLOW_RADIUS).unwrap();
        let per = per_character_pose_scores(clip, ann, POSE_FOLLOW_RADIUS).unwrap();
        assert_eq!(per, vec![combined]);
    }

    #[test]
    fn two_characters_are_scored_independently() {
        let config = DatasetConfig {
            motion: MotionFamily::WalkCycle,
            camera: CameraFamily::Static,
            characters: 2,
            frames: 9,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&config, 1, 13).unwrap();
        let (clip, ann) = &data[0];
        let per = per_character_pose_scores(clip, ann, POSE_FOLLOW_RADIUS).unwrap();
        assert_eq!(per.len(), 2);
        for (i, s) in per.iter().enumerate() {
            assert!(*s >= 0.75, "character {i} self-consistency score {s}");
        }
    }

    #[test]
    fn csv_header_is_written_exactly_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let row = MetricsRow {
            run_id: "r1".into(),
            clip_id: "c0".into(),
            psnr: 30.5,
            ssim: 0.9,
            pose_following: 1.0,
            wall_time_s: 0.25,
        };
        append_csv_row(&path, METRICS_HEADER, &row.to_csv_line()).unwrap();
        append_csv_row(&path, METRICS_HEADER, &row.to_csv_line()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], lines[2]);
        assert!(lines[1].starts_with("r1,c0,30.5,0.9,1,"));
    }
}
