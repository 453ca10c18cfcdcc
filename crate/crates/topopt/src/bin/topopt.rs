//! Benchmark driver. Configuration precedence: built-in defaults, then
//! `--config` key=value pairs, then command-line flags. Logging is
//! controlled by the `TOPOPT_LOG` environment variable (error, warn,
//! info, debug, trace).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use topopt::io::read_kv_file;
use topopt::mesh::Benchmark;
use topopt::runner::{render_summary, run, Mode, RunConfig};

#[derive(Parser)]
#[command(name = "topopt", version, about = "3D topology optimization benchmarks")]
struct Args {
    /// Benchmark problem: cb, mbb, ls or bd
    #[arg(long)]
    problem: Option<String>,
    /// Displacement elements per axis
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"])]
    nel: Option<Vec<usize>>,
    /// Volume fraction in (0, 1)
    #[arg(long)]
    volfrac: Option<f64>,
    /// Filter radius in density-cell edges
    #[arg(long)]
    rmin: Option<f64>,
    /// Density cells per displacement element edge
    #[arg(long)]
    nmr: Option<usize>,
    /// Design cells per displacement element edge
    #[arg(long)]
    dmr: Option<usize>,
    /// Element degree, 1 to 3
    #[arg(long)]
    degree: Option<usize>,
    /// Element family: lagrange or serendipity
    #[arg(long)]
    family: Option<String>,
    /// trad, mr or adaptive; defaults to mr when nmr > 1
    #[arg(long)]
    mode: Option<String>,
    /// Void/solid fixing strategy E0..E4 (adaptive mode)
    #[arg(long)]
    strategy: Option<String>,
    /// Preconditioner: gmg or diag
    #[arg(long)]
    precond: Option<String>,
    /// Multigrid hierarchy depth
    #[arg(long)]
    mg_levels: Option<usize>,
    /// Multigrid cycle: v or w
    #[arg(long)]
    mg_cycle: Option<String>,
    /// Thread budget; results are identical for any value
    #[arg(long)]
    threads: Option<usize>,
    /// Directory for density fields, the iteration log and the summary
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// key=value file applied before the flags
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

fn build(args: &Args) -> topopt::Result<RunConfig> {
    let mut cfg = RunConfig::new(Benchmark::Cantilever);
    let mut mode_given = args.mode.is_some();
    if let Some(path) = &args.config {
        for (k, v) in read_kv_file(path)? {
            mode_given |= k == "mode";
            cfg.apply_kv(&k, &v)?;
        }
    }
    if let Some(p) = &args.problem {
        cfg.apply_kv("problem", p)?;
    }
    if let Some(nel) = &args.nel {
        cfg.nelx = nel[0];
        cfg.nely = nel[1];
        cfg.nelz = nel[2];
    }
    if let Some(v) = args.volfrac {
        cfg.vol_frac = Some(v);
    }
    if let Some(v) = args.rmin {
        cfg.r_min = v;
    }
    if let Some(v) = args.nmr {
        cfg.n_mr = v;
    }
    if let Some(v) = args.dmr {
        cfg.d_mr = v;
    }
    if let Some(v) = args.degree {
        cfg.degree = v;
    }
    if let Some(s) = &args.family {
        cfg.apply_kv("family", s)?;
    }
    if let Some(s) = &args.mode {
        cfg.apply_kv("mode", s)?;
    }
    if let Some(s) = &args.strategy {
        cfg.apply_kv("strategy", s)?;
    }
    if let Some(s) = &args.precond {
        cfg.apply_kv("precond", s)?;
    }
    if let Some(v) = args.mg_levels {
        cfg.mg.levels = v;
    }
    if let Some(s) = &args.mg_cycle {
        cfg.apply_kv("mg_cycle", s)?;
    }
    if let Some(v) = args.threads {
        cfg.threads = v;
    }
    if let Some(dir) = &args.out {
        cfg.out_dir = Some(dir.clone());
    }
    if !mode_given {
        cfg.mode = if cfg.n_mr > 1 { Mode::Multires } else { Mode::Traditional };
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("TOPOPT_LOG")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            // Usage problems are configuration errors; only help and
            // version requests exit clean.
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match build(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(&cfg) {
        Ok(rep) => {
            let mut out = std::io::stdout().lock();
            if render_summary(&mut out, &cfg, &rep).is_err() {
                return ExitCode::from(5);
            }
            ExitCode::from(rep.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
