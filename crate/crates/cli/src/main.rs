use std::path::PathBuf;
use std::process::ExitCode;

use cem_lab::config::parse_grid;
use cem_lab::{cmd_attack, cmd_bounds, cmd_report, cmd_sweep, cmd_train, LabConfig, LabError, RunManifest};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cem-lab", version, about = "Train, attack and audit noise-defended split models")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    noise_std: Option<f64>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Run directory; every artifact path is relative to it.
    #[arg(long, global = true, default_value = "cem-run")]
    out: PathBuf,
    /// Comma-separated noise variances for `sweep`.
    #[arg(long, global = true)]
    grid: Option<String>,
    /// Worker threads for sweeps and Monte-Carlo estimates.
    #[arg(long, env = "CEM_LAB_THREADS", global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Train encoder, decoder and mixture.
    Train,
    /// Train an inversion attacker against a trained run (--seed and
    /// --epochs apply to the attacker).
    Attack,
    /// Report the information bounds of a trained run.
    Bounds,
    /// Train and attack one model per noise variance.
    Sweep,
    /// Summarize the artifacts in --out.
    Report,
}

impl Cli {
    fn base_config(&self) -> Result<LabConfig, LabError> {
        match &self.config {
            Some(path) => LabConfig::from_file(path),
            None => Ok(LabConfig::default()),
        }
    }

    fn training_config(&self) -> Result<LabConfig, LabError> {
        let mut cfg = self.base_config()?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.noise_std {
            cfg.noise_std = v;
        }
        if let Some(v) = self.k {
            cfg.k = Some(v);
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(g) = &self.grid {
            cfg.grid = parse_grid(g)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn reject(&self, flags: &[(&str, bool)]) -> Result<(), LabError> {
        let given: Vec<&str> = flags.iter().filter(|(_, set)| *set).map(|(f, _)| *f).collect();
        if given.is_empty() {
            Ok(())
        } else {
            Err(LabError::Usage(format!("{} not accepted by this command", given.join(", "))))
        }
    }

    fn run(&self) -> Result<(), LabError> {
        match self.command {
            Command::Train => {
                self.reject(&[("--grid", self.grid.is_some())])?;
                let cfg = self.training_config()?;
                if let Some(k) = cfg.k.filter(|k| *k < cfg.n_classes) {
                    eprintln!("cem-lab: warning: k = {k} is below the {} classes", cfg.n_classes);
                }
                let m = cmd_train(&cfg, &self.out)?;
                println!("run {} -> {}", m.run_id, self.out.display());
                if let Some(acc) = m.test_accuracy {
                    println!("test accuracy {acc:.4}");
                }
            }
            Command::Attack => {
                self.reject(&[
                    ("--lambda", self.lambda.is_some()),
                    ("--noise-std", self.noise_std.is_some()),
                    ("--k", self.k.is_some()),
                    ("--grid", self.grid.is_some()),
                ])?;
                let mut cfg = match &self.config {
                    Some(path) => LabConfig::from_file(path)?,
                    None => RunManifest::load(&self.out)?.config,
                };
                if let Some(v) = self.seed {
                    cfg.attack_seed = Some(v);
                }
                if let Some(v) = self.epochs {
                    cfg.attack_epochs = v;
                }
                cfg.validate()?;
                let r = cmd_attack(&self.out, &cfg.attack())?;
                println!(
                    "mse train {:.6}  infer {:.6}  psnr {:.2} / {:.2} dB  floor {:.3e}",
                    r.mse_train, r.mse_infer, r.psnr_train, r.psnr_infer, r.floor
                );
            }
            Command::Bounds | Command::Report => {
                self.reject(&[
                    ("--config", self.config.is_some()),
                    ("--seed", self.seed.is_some()),
                    ("--lambda", self.lambda.is_some()),
                    ("--noise-std", self.noise_std.is_some()),
                    ("--k", self.k.is_some()),
                    ("--epochs", self.epochs.is_some()),
                    ("--grid", self.grid.is_some()),
                ])?;
                if self.command == Command::Bounds {
                    let b = cmd_bounds(&self.out)?;
                    println!(
                        "mi <= {:.6}  rel H(x|z) >= {:.6}  cem_loss {:.6}  mse floor {:.6e} (h_x offset {})",
                        b.mi_bound, b.rel_cond_entropy, b.cem_loss, b.mse_floor, b.h_x_offset
                    );
                } else {
                    println!("{}", cmd_report(&self.out)?.summary());
                }
            }
            Command::Sweep => {
                let rows = cmd_sweep(&self.training_config()?, &self.out)?;
                let failed: Vec<_> = rows.iter().filter(|r| !r.is_ok()).collect();
                for r in &rows {
                    if r.is_ok() {
                        println!(
                            "var {:<6} rel_H {:>9.4}  mse_infer {:.6}  acc {:.4}",
                            r.variance, r.rel_cond_entropy, r.mse_infer, r.accuracy
                        );
                    } else {
                        println!("var {:<6} failed: {}", r.variance, r.error);
                    }
                }
                if !failed.is_empty() {
                    return Err(LabError::Core(cem_core::CemError::DegenerateData(format!(
                        "{} of {} grid points failed",
                        failed.len(),
                        rows.len()
                    ))));
                }
            }
        }
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("cem-lab: thread pool: {e}");
        }
    }
    match cli.run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cem-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
