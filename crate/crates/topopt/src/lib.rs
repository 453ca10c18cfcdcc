//! Topology optimization of 3D structures by compliance minimization.
//!
//! The toolkit solves the classic SIMP formulation
//!
//! ```text
//!   min  f'u   s.t.  K(rho) u = f,   sum(v_i rho_i) <= V_max,   0 <= rho <= 1
//! ```
//!
//! on structured hexahedral meshes, with a few ingredients aimed at large
//! problems:
//!
//! * a three-mesh multiresolution scheme (displacement / density / design),
//! * a trust-region sequential linear programming solver with an exact
//!   single-constraint LP subproblem,
//! * conjugate gradients preconditioned by geometric multigrid,
//! * gradient-aware thresholding with volume-preserving Heaviside projection,
//! * adaptive escalation of the finite element degree with fixing of
//!   decided void/solid regions.
//!
//! Entry points: [`runner::run`] drives a whole optimization from a
//! [`runner::RunConfig`]; the individual stages are exposed by the modules
//! below and demonstrated by the `examples/` directory.

pub mod adaptive;
pub mod elements;
pub mod error;
pub mod filter;
pub mod io;
pub mod linsolve;
pub mod mesh;
pub mod runner;
pub mod slp;
pub mod sparse;
pub mod threshold;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
