//! Command-line driver: dataset generation, staged training, sampling,
//! evaluation, the latent diagnostic, the gradient audit, and matched
//! ablation studies. Exit codes: 0 on success, 1 on usage errors, 2 on
//! runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use isa4d::config::RunConfig;
use isa4d::dit::AblationMode;
use isa4d::error::{Error, Result};
use isa4d::exp;

#[derive(Parser)]
#[command(
    name = "isa4d",
    version,
    about = "Interspatial-attention video diffusion at desk scale"
)]
struct Cli {
    /// Configuration file (INI sections; defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `run.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config's `run.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Step-count override for the invoked stage (training or sampler).
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Guidance-scale override for sampling and evaluation.
    #[arg(long, global = true)]
    cfg_scale: Option<f32>,
    /// Arm selector: a pose-conditioning mode for train-dit / sample / eval,
    /// a regularizer arm for train-vae, or the study family for ablate.
    #[arg(long, value_enum, global = true)]
    ablation: Option<AblationArg>,
    /// Resume training from the checkpoint in the output directory.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum AblationArg {
    /// Interspatial positional encoding (the full model).
    Ispe,
    /// No positional encoding on pose tokens.
    Nope,
    /// Rendered 2-D pose maps instead of 3-D tokens.
    #[value(name = "2d")]
    Render2d,
    /// Sub-latent regularizer on (the default training setup).
    Reg,
    /// Sub-latent regularizer off.
    Noreg,
}

impl AblationArg {
    fn pe_mode(self) -> Option<AblationMode> {
        match self {
            AblationArg::Ispe => Some(AblationMode::Ispe),
            AblationArg::Nope => Some(AblationMode::NoPe),
            AblationArg::Render2d => Some(AblationMode::Render2d),
            _ => None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/validation splits as PPM directories.
    GenData,
    /// Train the causal video autoencoder.
    TrainVae,
    /// Train the diffusion transformer on autoencoder latents.
    TrainDit,
    /// Sample one held-out clip and write PPM frame sequences.
    Sample,
    /// Sample held-out clips and append metric rows to metrics.csv.
    Eval,
    /// Reconstruction-quality profile across latent frame positions.
    DiagnoseLatent,
    /// Finite-difference audit of every operator and the composed models.
    Gradcheck,
    /// Matched multi-seed studies: positional encoding (ispe/nope/2d) or
    /// latent regularization (reg/noreg).
    Ablate,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn pe_mode_for(arg: Option<AblationArg>, context: &str) -> Result<Option<AblationMode>> {
    match arg {
        None => Ok(None),
        Some(a) => a.pe_mode().map(Some).ok_or_else(|| {
            Error::Config(format!(
                "--ablation {} does not name a pose-conditioning mode; {context} takes ispe, nope, or 2d",
                if a == AblationArg::Reg { "reg" } else { "noreg" }
            ))
        }),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.display().to_string();
    }
    if let Some(scale) = cli.cfg_scale {
        cfg.dit.cfg_scale = scale;
    }
    match &cli.command {
        Command::TrainVae => {
            if let Some(steps) = cli.steps {
                cfg.vae_steps = steps;
            }
            match cli.ablation {
                None | Some(AblationArg::Reg) => {}
                Some(AblationArg::Noreg) => cfg.vae.lambda_reg = 0.0,
                Some(_) => {
                    return Err(Error::Config(
                        "train-vae takes --ablation reg or noreg".into(),
                    ))
                }
            }
        }
        Command::TrainDit | Command::Sample | Command::Eval => {
            if let Some(mode) = pe_mode_for(cli.ablation, "this command")? {
                cfg.dit.ablation = mode;
            }
            if let Some(steps) = cli.steps {
                if matches!(cli.command, Command::TrainDit) {
                    cfg.dit_train.steps = steps;
                } else {
                    cfg.dit.sampler_steps = steps;
                }
            }
        }
        _ => {}
    }
    cfg.finalize()?;
    let out = PathBuf::from(&cfg.out);

    match cli.command {
        Command::GenData => {
            let (train_dir, val_dir) = exp::gen_data_run(&cfg, &out)?;
            println!(
                "wrote {} train and {} validation clips under {} and {}",
                cfg.train_clips,
                cfg.val_clips,
                train_dir.display(),
                val_dir.display()
            );
        }
        Command::TrainVae => {
            let (model, records) = exp::train_vae_run(&cfg, &out, cli.resume)?;
            let last = records.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!("autoencoder: {} steps, final loss {last:.5}", records.len());
            let splits = exp::make_splits(&cfg)?;
            let summary = exp::eval_vae_reconstruction(&model, &splits.val)?;
            println!(
                "held-out reconstruction: {:.2} dB (temporal-mean baseline {:.2} dB)",
                summary.mean_model_psnr, summary.mean_baseline_psnr
            );
        }
        Command::TrainDit => {
            let (_, records) = exp::train_dit_run(&cfg, &out, cli.resume)?;
            let train = records.last().map(|r| r.train_loss).unwrap_or(f64::NAN);
            let val = exp::final_val_loss(&records)?;
            println!(
                "diffusion model ({}): {} steps, final train loss {train:.5}, val loss {val:.5}",
                cfg.dit.ablation.tag(),
                records.len()
            );
        }
        Command::Sample => {
            let dir = exp::sample_run(&cfg, &out)?;
            println!("wrote frames to {}", dir.display());
        }
        Command::Eval => {
            let run_id = format!("{}-s{}", cfg.dit.ablation.tag(), cfg.seed);
            let rows = exp::eval_run(&cfg, &out, &run_id)?;
            for row in &rows {
                println!(
                    "{}: psnr {:.2} ssim {:.4} pose {:.3} ({:.1}s)",
                    row.clip_id, row.psnr, row.ssim, row.pose_following, row.wall_time_s
                );
            }
            let n = rows.len() as f64;
            println!(
                "means over {} clips: psnr {:.2} ssim {:.4} pose {:.3}",
                rows.len(),
                rows.iter().map(|r| r.psnr).sum::<f64>() / n,
                rows.iter().map(|r| r.ssim).sum::<f64>() / n,
                rows.iter().map(|r| r.pose_following).sum::<f64>() / n,
            );
        }
        Command::DiagnoseLatent => {
            let (profile, bias) = exp::diagnose_run(&cfg, &out)?;
            for (i, p) in profile.iter().enumerate() {
                println!("position {i}: {p:.2} dB");
            }
            println!("last-position bias score: {bias:.3} dB");
        }
        Command::Gradcheck => {
            let entries = exp::gradcheck_suite(cfg.seed)?;
            let mut failed = 0usize;
            for e in &entries {
                let verdict = if e.pass() { "pass" } else { "FAIL" };
                println!("{:<18} {:>12.3e}  {verdict}", e.name, e.err);
                if !e.pass() {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(Error::InvalidArg(format!(
                    "{failed} of {} gradient checks failed",
                    entries.len()
                )));
            }
            println!("all {} gradient checks passed", entries.len());
        }
        Command::Ablate => {
            let seeds = [cfg.seed, cfg.seed.wrapping_add(1), cfg.seed.wrapping_add(2)];
            match cli.ablation {
                Some(AblationArg::Reg) | Some(AblationArg::Noreg) => {
                    let arms = exp::reg_ablation_run(&cfg, &seeds, &out)?;
                    let mut wins = 0usize;
                    for a in &arms {
                        let win = a.bias_reg.abs() < a.bias_noreg.abs()
                            && a.dit_loss_reg < a.dit_loss_noreg;
                        if win {
                            wins += 1;
                        }
                        println!(
                            "seed {}: bias {:+.3} vs {:+.3} dB, diffusion loss {:.5} vs {:.5}{}",
                            a.seed,
                            a.bias_reg,
                            a.bias_noreg,
                            a.dit_loss_reg,
                            a.dit_loss_noreg,
                            if win { "  <- regularizer wins" } else { "" }
                        );
                    }
                    println!("regularizer wins in {wins} of {} seeds", arms.len());
                }
                _ => {
                    let arms = exp::pe_ablation_run(&cfg, &seeds, &out)?;
                    let mut wins = 0usize;
                    for chunk in arms.chunks(3) {
                        let find = |m: AblationMode| {
                            chunk
                                .iter()
                                .find(|a| a.mode == m)
                                .map(|a| a.final_val_loss)
                                .unwrap_or(f64::NAN)
                        };
                        let (i, n, r) = (
                            find(AblationMode::Ispe),
                            find(AblationMode::NoPe),
                            find(AblationMode::Render2d),
                        );
                        let win = i < n && i < r;
                        if win {
                            wins += 1;
                        }
                        println!(
                            "seed {}: ispe {i:.5}, nope {n:.5}, 2d {r:.5}{}",
                            chunk[0].seed,
                            if win { "  <- ispe wins" } else { "" }
                        );
                    }
                    println!(
                        "interspatial encoding wins in {wins} of {} seeds",
                        arms.len() / 3
                    );
                }
            }
        }
    }
    Ok(())
}
