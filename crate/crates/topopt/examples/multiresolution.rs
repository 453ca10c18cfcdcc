//! The three-mesh scheme: displacement, density and design live on
//! separate grids. Splitting each displacement element into n_mr^3
//! density cells buys boundary resolution without growing the
//! equilibrium system, and the corrected compliance makes the results
//! comparable across discretizations.
//!
//! ```bash
//! cargo run --release --example multiresolution
//! ```

use topopt::mesh::Benchmark;
use topopt::runner::{run, Mode, RunConfig};

fn main() -> topopt::Result<()> {
    let base = (12, 6, 6);
    println!("cantilever {}x{}x{}, volume fraction 0.2\n", base.0, base.1, base.2);
    println!(
        "{:<28} {:>10} {:>12} {:>14} {:>14}",
        "run", "dofs", "dens cells", "raw F", "corrected F_prj"
    );

    for (label, n_mr, d_mr) in [("traditional", 1, 1), ("multires n_mr=2", 2, 2), ("multires n_mr=3", 3, 3)] {
        let mut cfg = RunConfig::new(Benchmark::Cantilever);
        cfg.nelx = base.0;
        cfg.nely = base.1;
        cfg.nelz = base.2;
        cfg.vol_frac = Some(0.2);
        cfg.n_mr = n_mr;
        cfg.d_mr = d_mr;
        cfg.mode = if n_mr > 1 { Mode::Multires } else { Mode::Traditional };
        // A radius over one displacement-element edge, whatever the split.
        cfg.r_min = 1.5 * n_mr as f64;

        let spec = cfg.mesh_spec_for(cfg.degree);
        let rep = run(&cfg)?;
        let dofs = 3 * (base.0 + 1) * (base.1 + 1) * (base.2 + 1);
        println!(
            "{:<28} {:>10} {:>12} {:>14.6e} {:>14.6e}",
            label,
            dofs,
            spec.n_density(),
            rep.f_raw,
            rep.f_prj.unwrap_or(f64::NAN),
        );
    }

    println!(
        "\nThe equilibrium system never changes size; only the density and \
         design grids refine. Raw compliances of different splits are not \
         directly comparable (coarser interpolation is stiffer), which is \
         what the corrected value fixes: every projected design is re-solved \
         with one degree-1 element per density cell."
    );
    Ok(())
}
