use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use dp3d_cli::commands::{cmd_eval, cmd_export, cmd_fit, cmd_lbo, cmd_synth, cmd_train, with_threads, REPORT_FILE};
use dp3d_cli::{CliError, CliResult, RunConfig};
use dp3d_core::pipeline::ModelVariant;

/// Articulated mesh reconstruction from dense 2D keypoints.
#[derive(Parser, Debug)]
#[command(name = "dp3d", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Spectral basis and eigenfunction preview meshes.
    Lbo,
    /// Synthetic keypoint dataset.
    Synth,
    /// Train the regressor and part model.
    Train,
    /// Per-instance pose optimisation from a checkpoint.
    Fit,
    /// Score predictions against ground truth.
    Eval,
    /// Posed, part-coloured meshes.
    Export,
}

/// Settings given on the command line win over the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (pins results for reproducibility).
    #[arg(long, global = true, env = "DP3D_THREADS")]
    threads: Option<usize>,
    #[arg(long, global = true)]
    mesh: Option<String>,
    #[arg(long, global = true)]
    labels: Option<PathBuf>,
    #[arg(long, global = true)]
    basis: Option<PathBuf>,
    #[arg(long, global = true)]
    n_u: Option<usize>,
    /// Repeat to sweep over part counts.
    #[arg(long = "m-parts", global = true)]
    m_parts: Vec<usize>,
    #[arg(long, global = true)]
    sigma_bar: Option<f64>,
    /// parts | no_parts_linear | parts_plus_blendshapes
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<ModelVariant>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    momentum: Option<f64>,
    #[arg(long, global = true)]
    weight_decay: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    n_instances: Option<usize>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    predictions: Option<PathBuf>,
    #[arg(long, global = true)]
    joint_regressor: Option<PathBuf>,
    #[arg(long, global = true)]
    n_preview: Option<usize>,
    #[arg(long, global = true)]
    max_export: Option<usize>,
    #[arg(long, global = true)]
    fit_iterations: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<ModelVariant, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown variant `{s}`"))
}

impl Overrides {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+;)*) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set! {
            mesh => mesh;
            n_u => n_u;
            sigma_bar => sigma_bar;
            variant => variant;
            epochs => optimizer.epochs;
            lr => optimizer.learning_rate;
            momentum => optimizer.momentum;
            weight_decay => optimizer.weight_decay;
            batch_size => optimizer.batch_size;
            seed => seed;
            n_instances => synth.n_instances;
            fit_iterations => fit.iterations;
            out => out_dir;
        }
        macro_rules! set_opt {
            ($($flag:ident),*) => {
                $(if self.$flag.is_some() { c.$flag = self.$flag.clone(); })*
            };
        }
        set_opt!(labels, basis, dataset, checkpoint, predictions, joint_regressor, n_preview, max_export);
        if !self.m_parts.is_empty() {
            c.m_parts = self.m_parts.clone();
        }
        Ok(c)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = cli.overrides.resolve()?;
    let command = cli.command;
    with_threads(cli.overrides.threads, move || match command {
        Command::Lbo => {
            let out = cmd_lbo(&cfg)?;
            println!("{}", out.basis.display());
            Ok(())
        }
        Command::Synth => {
            println!("{}", cmd_synth(&cfg)?.display());
            Ok(())
        }
        Command::Train => {
            let outs = cmd_train(&cfg, |m, r| {
                eprintln!(
                    "m={m} epoch={} total={:.6} rep={:.6} canon={:.6} arap={:.6} entropy={:.6} lr={}",
                    r.epoch, r.loss.total, r.loss.rep, r.loss.canon, r.loss.arap, r.loss.entropy, r.lr
                );
            })?;
            for o in outs {
                println!("{}", o.checkpoint.display());
            }
            Ok(())
        }
        Command::Fit => {
            println!("{}", cmd_fit(&cfg)?.display());
            Ok(())
        }
        Command::Eval => {
            let r = cmd_eval(&cfg)?;
            eprintln!("mpjpe={} re={} reprojection={}", r.mpjpe, r.re, r.reprojection);
            println!("{}", cfg.out_dir.join(REPORT_FILE).display());
            Ok(())
        }
        Command::Export => {
            for p in cmd_export(&cfg)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).machine_line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.machine_line());
            ExitCode::FAILURE
        }
    }
}
