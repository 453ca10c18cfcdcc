//! End-to-end benchmark run: a cantilever beam optimized the traditional
//! way (one SLP stage, single mesh), followed by gradient-aware
//! thresholding to a pure 0/1 design.
//!
//! ```bash
//! cargo run --release --example cantilever [OUT_DIR]
//! ```
//!
//! The density fields, iteration log and summary land in OUT_DIR
//! (default `target/cantilever_out`); the same summary is printed here.

use std::path::PathBuf;

use topopt::mesh::Benchmark;
use topopt::runner::{render_summary, run, RunConfig};

fn main() -> topopt::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("target/cantilever_out"));

    let mut cfg = RunConfig::new(Benchmark::Cantilever);
    cfg.nelx = 24;
    cfg.nely = 8;
    cfg.nelz = 8;
    cfg.vol_frac = Some(0.2);
    cfg.r_min = 1.5;
    cfg.out_dir = Some(out.clone());

    let report = run(&cfg)?;
    render_summary(&mut std::io::stdout().lock(), &cfg, &report)?;
    println!("\nfields and logs written to {}", out.display());
    std::process::exit(report.exit_code());
}
