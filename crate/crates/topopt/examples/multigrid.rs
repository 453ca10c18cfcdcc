//! Geometric multigrid as a PCG preconditioner. The same cantilever
//! stiffness system (uniform density 0.2) is solved twice, once with
//! the multigrid hierarchy and once with plain Jacobi scaling, and the
//! iteration counts speak for themselves.
//!
//! ```bash
//! cargo run --release --example multigrid
//! ```

use topopt::elements::{ElemFamily, ElementKit, Material};
use topopt::linsolve::{
    build_assembly_map, build_mg_numeric, build_mg_symbolic, pcg, DiagPrecond, GmgConfig,
};
use topopt::mesh::{apply_problem, build_mesh, Benchmark, MeshSpec, ProblemParams};

fn main() -> topopt::Result<()> {
    let spec = MeshSpec {
        nelx: 24,
        nely: 8,
        nelz: 8,
        n_mr: 1,
        d_mr: 1,
        degree: 1,
        family: ElemFamily::Lagrange,
    };
    let mesh = build_mesh(spec)?;
    let bc = apply_problem(Benchmark::Cantilever, &mesh, &ProblemParams::default())?;
    let mat = Material { e0: 1.0, e_min: 1e-6, nu: 0.3, penal: 3.0 };
    let kit = ElementKit::new(spec.degree, spec.family, mat.nu, spec.n_mr)?;

    let amap = build_assembly_map(&mesh, &bc.fixed_dofs)?;
    let mut k = amap.matrix();
    let rho = vec![0.2; spec.n_density()];
    amap.assemble_into(&mesh, &kit, &mat, &rho, &mut k);
    let f = amap.dof_map.reduce(&bc.load_vector(mesh.n_dofs()));

    println!(
        "cantilever {}x{}x{}, {} free DOFs, density 0.2 everywhere, tol 1e-8\n",
        spec.nelx,
        spec.nely,
        spec.nelz,
        amap.n_free()
    );

    let tol = 1e-8;
    let symb = build_mg_symbolic(&mesh, &amap.dof_map, &GmgConfig::default())?;
    let mg = build_mg_numeric(&k, &symb)?;
    let mut u = vec![0.0; f.len()];
    let gmg_stats = pcg(&k, &f, &mut u, &mg, tol, 5000)?;
    println!(
        "multigrid ({} levels): {:>4} iterations, residual {:.3e}",
        mg.levels(),
        gmg_stats.iterations,
        gmg_stats.rel_residual
    );

    let diag = DiagPrecond::new(&k)?;
    let mut u = vec![0.0; f.len()];
    let diag_stats = pcg(&k, &f, &mut u, &diag, tol, 5000)?;
    println!(
        "diagonal scaling:     {:>4} iterations, residual {:.3e}",
        diag_stats.iterations, diag_stats.rel_residual
    );

    println!(
        "\nThe gap widens with mesh size: multigrid iteration counts stay \
         nearly flat under refinement while diagonal scaling degrades with \
         the condition number."
    );
    Ok(())
}
