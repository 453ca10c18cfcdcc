//! Adaptive degree escalation: the run starts with cheap degree-1
//! elements, then re-solves on degree-2 elements from the degree-1
//! design. Cells whose density and gradient say "decided void" or
//! "decided solid" are frozen, and displacement DOFs buried inside
//! frozen void are suppressed outright, so the expensive stage works on
//! a reduced problem.
//!
//! ```bash
//! cargo run --release --example adaptive_degree
//! ```

use topopt::adaptive::FixStrategy;
use topopt::mesh::Benchmark;
use topopt::runner::{run, Mode, RunConfig};

fn main() -> topopt::Result<()> {
    let mut cfg = RunConfig::new(Benchmark::Mbb);
    cfg.nelx = 24;
    cfg.nely = 8;
    cfg.nelz = 8;
    cfg.vol_frac = Some(0.2);
    cfg.mode = Mode::Adaptive;
    cfg.degree = 2;
    cfg.fix.strategy = FixStrategy::E4;

    let rep = run(&cfg)?;

    println!("stage  degree  accepted  rejected");
    for s in &rep.stages {
        println!("{:<6} {:<7} {:<9} {}", s.stage, s.degree, s.n_it, s.n_rs);
    }
    println!();
    println!("final compliance     {:.6e}", rep.f_raw);
    if let Some(f) = rep.f_prj {
        println!("corrected (0/1)      {f:.6e}");
    }
    println!("design variables pinned or frozen: {}", rep.fixed_design);
    println!("displacement nodes suppressed:     {}", rep.suppressed.len());
    println!(
        "\nStrategies: E0 never fixes, E1 fixes at stage entry, E2 refreshes \
         the frozen set every accepted step, E3 every refresh_period steps, \
         E4 at entry plus once more after refresh_period steps."
    );
    Ok(())
}
