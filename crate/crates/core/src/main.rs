use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use isoflow::experiment::{
    cmd_compare, cmd_diagnose, cmd_oracle_check, cmd_sample, cmd_train, format_comparison, output_root, CliError,
    DiagnoseArgs, OracleArgs, SampleArgs,
};
use isoflow::sampler::Solver;

#[derive(Parser)]
#[command(name = "isoflow", version, about = "Acceleration-regularized flow matching on toy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| CliError::Config(format!("--{flag}: {p:?}: {e}"))))
        .collect()
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        nfe: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        cfg_scale: f64,
        #[arg(long, default_value = "euler")]
        solver: Solver,
        #[arg(long)]
        seed: u64,
        /// Class label for conditional models; defaults to cycling all classes.
        #[arg(long)]
        label: Option<usize>,
        /// Samples CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the trajectory CSV here.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Curvature, speed and one-step error diagnostics for a checkpoint.
    Diagnose {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "1,2,4,32")]
        nfe_list: String,
        #[arg(long, default_value_t = 256)]
        paths: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; defaults to `diagnose_<ckpt stem>` under the output root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the analytic 1D mixture oracle against its own identities.
    OracleCheck {
        #[arg(long)]
        k: usize,
        /// Comma-separated component means.
        #[arg(long, allow_hyphen_values = true)]
        means: String,
        /// Comma-separated component stds.
        #[arg(long)]
        stds: String,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        /// Write the residual grids here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the metric logs of two run directories.
    Compare {
        dir_a: PathBuf,
        dir_b: PathBuf,
        /// Report directory; defaults to `compare_<a>_<b>` under the output root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn stem(p: &std::path::Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let root = output_root(&PathBuf::from("."));
    match cli.command {
        Command::Train { config } => {
            let s = cmd_train(&config)?;
            println!("run directory: {}", s.run_dir.display());
            println!("final sw2 (nfe 1,2,4): {:?}", s.final_sw2);
            println!("final mean curvature integral: {}", s.final_mean_curvature);
        }
        Command::Sample { ckpt, nfe, n, cfg_scale, solver, seed, label, out, trajectory } => {
            let to_stdout = out.is_none();
            let csv = cmd_sample(&SampleArgs { ckpt, nfe, n, cfg_scale, solver, seed, label, out, trajectory })?;
            if to_stdout {
                std::io::stdout().write_all(&csv).map_err(|e| CliError::Input(e.to_string()))?;
            }
        }
        Command::Diagnose { ckpt, dataset, nfe_list, paths, seed, out } => {
            let out_dir = out.unwrap_or_else(|| root.join(format!("diagnose_{}", stem(&ckpt))));
            let mut args = DiagnoseArgs::new(ckpt, &dataset, out_dir.clone());
            args.nfe_list = parse_list("nfe-list", &nfe_list)?;
            args.paths = paths;
            args.seed = seed;
            let rows = cmd_diagnose(&args)?;
            println!("diagnostics written to {}", out_dir.display());
            for r in rows {
                println!(
                    "{}: mean kappa {:.6}, max kappa {:.6}, path integral {:.6}, speed cv {:.6}",
                    r.run_id, r.mean_kappa, r.max_kappa, r.path_integral_kappa, r.speed_cv
                );
            }
        }
        Command::OracleCheck { k, means, stds, tol, out } => {
            let (means, stds): (Vec<f64>, Vec<f64>) = (parse_list("means", &means)?, parse_list("stds", &stds)?);
            if means.len() != k || stds.len() != k {
                return Err(CliError::Config(format!("--k {k} needs {k} means and {k} stds")));
            }
            let s = cmd_oracle_check(&OracleArgs { means, stds, tol, out_dir: out })?;
            println!("fundamental-limit max residual: {:.3e}", s.fundamental_residual);
            println!("continuity max residual: {:.3e}", s.continuity_residual);
            println!("max |Dv/Dt| at t=0.1: {:.6}", s.max_abs_lhs_t01);
        }
        Command::Compare { dir_a, dir_b, out } => {
            let out_dir = out.unwrap_or_else(|| root.join(format!("compare_{}_{}", stem(&dir_a), stem(&dir_b))));
            let rows = cmd_compare(&dir_a, &dir_b, &out_dir)?;
            format_comparison(std::io::stdout(), &rows).map_err(|e| CliError::Input(e.to_string()))?;
            println!("report written to {}", out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, which is reserved for numerical aborts
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
