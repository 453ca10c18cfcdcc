//! Density projection: filtering design variables onto the density mesh.
//!
//! Every density cell takes a convex combination of the design variables
//! whose cell centers lie within the filter radius:
//!
//! ```text
//!   rho_i = sum_j (w_ij / w_i) x_j,    w_i = sum_j w_ij,
//!   w_ij  = exp(-d_ij^2 / (2 (r/3)^2)) / (2 pi (r/3))   for d_ij <= r.
//! ```
//!
//! Distances and the radius `r` are measured in density-cell edge lengths
//! (one displacement element spans `n_mr` of them). The weights are
//! constant for a fixed mesh, so the plan is built once and reused; its
//! transpose chains gradients from the density mesh back to the design
//! variables, and the volume gradient it induces is cached here as well.

use crate::mesh::MeshSpec;
use crate::sparse::Csr;
use crate::{Error, Result};

/// Raw (unnormalized) filter kernel weight for a center distance `dist`,
/// both arguments in density-cell edge units.
pub fn kernel_weight(dist: f64, r_min: f64) -> f64 {
    if dist > r_min {
        return 0.0;
    }
    let sigma = r_min / 3.0;
    (-dist * dist / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma)
}

/// Precomputed projection from design variables to densities.
#[derive(Debug, Clone)]
pub struct FilterPlan {
    w: Csr,
    wt: Csr,
    vol_grad: Vec<f64>,
    r_min: f64,
}

impl FilterPlan {
    /// Build the projection weights for a mesh. Fails if some density cell
    /// has no design cell within the radius (the radius is too small for
    /// the design mesh spacing).
    pub fn build(spec: &MeshSpec, r_min: f64) -> Result<FilterPlan> {
        if !(r_min > 0.0) {
            return Err(Error::Config(format!("filter radius must be positive, got {r_min}")));
        }
        let n_rho = spec.n_density();
        let n_x = spec.n_design();
        let ddims = spec.design_dims();
        // Physical radius: density edges are 1/n_mr cm.
        let r_phys = r_min / spec.n_mr as f64;
        let h_design = 1.0 / spec.d_mr as f64;

        let mut indptr = Vec::with_capacity(n_rho + 1);
        let mut indices: Vec<u32> = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        indptr.push(0usize);
        let range = |c: f64, dim: usize| -> std::ops::Range<usize> {
            // Design cells k with |(k + 0.5) h - c| <= r per axis.
            let lo = ((c - r_phys) / h_design - 0.5).ceil().max(0.0) as usize;
            let hi = (((c + r_phys) / h_design - 0.5).floor() + 1.0).max(0.0) as usize;
            lo..hi.min(dim)
        };
        for i in 0..n_rho {
            let c = spec.density_center(i);
            let mut sum = 0.0;
            let start = values.len();
            for jz in range(c[2], ddims[2]) {
                for jy in range(c[1], ddims[1]) {
                    for jx in range(c[0], ddims[0]) {
                        let d = spec.design_center(jx + ddims[0] * (jy + ddims[1] * jz));
                        let dist_phys = ((c[0] - d[0]).powi(2)
                            + (c[1] - d[1]).powi(2)
                            + (c[2] - d[2]).powi(2))
                        .sqrt();
                        let w = kernel_weight(dist_phys * spec.n_mr as f64, r_min);
                        if w > 0.0 {
                            indices.push((jx + ddims[0] * (jy + ddims[1] * jz)) as u32);
                            values.push(w);
                            sum += w;
                        }
                    }
                }
            }
            if values.len() == start {
                return Err(Error::Config(format!(
                    "density cell {i} has no design cell within radius {r_min}; \
                     increase the filter radius"
                )));
            }
            for v in &mut values[start..] {
                *v /= sum;
            }
            indptr.push(values.len());
        }
        let mut w = Csr::from_pattern(n_rho, n_x, indptr, indices);
        w.values_mut().copy_from_slice(&values);
        let wt = w.transpose();
        // Volume gradient: d/dx_k sum_i v_i rho_i = v_e * (column sums of W).
        let v_e = spec.density_cell_volume();
        let ones = vec![v_e; n_rho];
        let mut vol_grad = vec![0.0; n_x];
        wt.mul_vec(&ones, &mut vol_grad);
        Ok(FilterPlan { w, wt, vol_grad, r_min })
    }

    /// rho = W x. Values stay in the convex hull of the design variables.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut rho = vec![0.0; self.w.nrows()];
        self.w.mul_vec(x, &mut rho);
        rho
    }

    /// Chain a density-mesh gradient back to the design variables: W' g.
    pub fn chain_to_design(&self, density_grad: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.wt.nrows()];
        self.wt.mul_vec(density_grad, &mut g);
        g
    }

    /// Gradient of the total volume with respect to the design variables
    /// (constant for a fixed mesh; always strictly positive).
    pub fn volume_gradient(&self) -> &[f64] {
        &self.vol_grad
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    pub fn n_density(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_design(&self) -> usize {
        self.w.ncols()
    }

    /// Projection weights of one density cell: (design ids, weights).
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        self.w.row(i)
    }
}
