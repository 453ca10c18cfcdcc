//! Hexahedral finite elements on the bi-unit reference cube.
//!
//! Four element types are supported: trilinear and triquadratic Lagrange
//! bricks (8 and 27 nodes) and quadratic and cubic serendipity bricks
//! (20 and 32 nodes). Physical elements are unit cubes, so the mapping to
//! the reference cube `[-1,1]^3` is an axis-aligned scaling with half-length
//! 1/2 per axis; the constant Jacobian is folded into the quadrature
//! weights once, never applied again downstream.
//!
//! Local node order is corners first (the usual counter-clockwise bottom
//! face then top face), followed by edge nodes, then face and interior
//! nodes where the family has them. Shared nodes are identified globally by
//! grid position, so any fixed local order is consistent across elements.

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Interpolation family of a hexahedral element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemFamily {
    /// Full tensor-product basis: (degree+1)^3 nodes.
    Lagrange,
    /// Reduced basis keeping corner and edge nodes only.
    Serendipity,
}

impl std::str::FromStr for ElemFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lagrange" => Ok(ElemFamily::Lagrange),
            "serendipity" => Ok(ElemFamily::Serendipity),
            other => Err(Error::Config(format!("unknown element family '{other}'"))),
        }
    }
}

impl std::fmt::Display for ElemFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ElemFamily::Lagrange => write!(f, "lagrange"),
            ElemFamily::Serendipity => write!(f, "serendipity"),
        }
    }
}

/// Number of nodes of a supported (degree, family) combination.
pub fn node_count(degree: usize, family: ElemFamily) -> Result<usize> {
    match (degree, family) {
        (1, ElemFamily::Lagrange) => Ok(8),
        (2, ElemFamily::Lagrange) => Ok(27),
        (2, ElemFamily::Serendipity) => Ok(20),
        (3, ElemFamily::Serendipity) => Ok(32),
        (d, f) => Err(Error::Config(format!(
            "unsupported element: degree {d} {f} (supported: lagrange 1-2, serendipity 2-3)"
        ))),
    }
}

/// Largest admissible design-mesh subdivision for this element type:
/// the number of independent sub-element stiffness contributions is capped
/// by the rank 3n - 6 of the element matrix, so d_mr^3 must stay below it.
pub fn max_design_subdivision(degree: usize, family: ElemFamily) -> Result<usize> {
    let n = node_count(degree, family)?;
    let rank = 3 * n - 6;
    let mut d = 1usize;
    while (d + 1) * (d + 1) * (d + 1) <= rank {
        d += 1;
    }
    Ok(d)
}

const CORNERS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

/// Edge list as corner index pairs: bottom ring, top ring, then verticals.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Reference coordinates of every local node, in canonical order.
pub fn local_nodes(degree: usize, family: ElemFamily) -> Result<Vec<[f64; 3]>> {
    node_count(degree, family)?;
    let mut nodes: Vec<[f64; 3]> = CORNERS.to_vec();
    if degree == 1 {
        return Ok(nodes);
    }
    // Edge nodes at the interior Lobatto-free uniform positions, ordered
    // from the lower-numbered corner toward the higher one.
    for [a, b] in EDGES {
        let (pa, pb) = (CORNERS[a], CORNERS[b]);
        for k in 1..degree {
            let t = k as f64 / degree as f64;
            nodes.push([
                pa[0] + t * (pb[0] - pa[0]),
                pa[1] + t * (pb[1] - pa[1]),
                pa[2] + t * (pb[2] - pa[2]),
            ]);
        }
    }
    if family == ElemFamily::Lagrange && degree == 2 {
        // Face centers (-x, +x, -y, +y, -z, +z) then the body center.
        nodes.push([-1.0, 0.0, 0.0]);
        nodes.push([1.0, 0.0, 0.0]);
        nodes.push([0.0, -1.0, 0.0]);
        nodes.push([0.0, 1.0, 0.0]);
        nodes.push([0.0, 0.0, -1.0]);
        nodes.push([0.0, 0.0, 1.0]);
        nodes.push([0.0, 0.0, 0.0]);
    }
    Ok(nodes)
}

/// 1D Lagrange basis value and derivative at `t` for the basis function
/// anchored at `nodes[i]`.
fn lagrange_1d(nodes: &[f64], i: usize, t: f64) -> (f64, f64) {
    let mut val = 1.0;
    for (j, &xj) in nodes.iter().enumerate() {
        if j != i {
            val *= (t - xj) / (nodes[i] - xj);
        }
    }
    let mut der = 0.0;
    for (k, &xk) in nodes.iter().enumerate() {
        if k == i {
            continue;
        }
        let mut term = 1.0 / (nodes[i] - xk);
        for (j, &xj) in nodes.iter().enumerate() {
            if j != i && j != k {
                term *= (t - xj) / (nodes[i] - xj);
            }
        }
        der += term;
    }
    (val, der)
}

/// Shape function values and reference-coordinate gradients at a point.
///
/// Returns `(phi, dphi)` with `dphi[i] = [d phi_i/d xi, d/d eta, d/d zeta]`.
pub fn shape_values(
    degree: usize,
    family: ElemFamily,
    p: [f64; 3],
) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
    let locs = local_nodes(degree, family)?;
    let [xi, eta, zeta] = p;
    let n = locs.len();
    let mut phi = vec![0.0; n];
    let mut grad = vec![[0.0; 3]; n];
    match (degree, family) {
        (_, ElemFamily::Lagrange) => {
            let axis: Vec<f64> = (0..=degree)
                .map(|k| -1.0 + 2.0 * k as f64 / degree as f64)
                .collect();
            let idx_of = |c: f64| {
                axis.iter()
                    .position(|&a| (a - c).abs() < 1e-12)
                    .expect("node coordinate on axis grid")
            };
            for (i, loc) in locs.iter().enumerate() {
                let (ix, iy, iz) = (idx_of(loc[0]), idx_of(loc[1]), idx_of(loc[2]));
                let (nx, dx) = lagrange_1d(&axis, ix, xi);
                let (ny, dy) = lagrange_1d(&axis, iy, eta);
                let (nz, dz) = lagrange_1d(&axis, iz, zeta);
                phi[i] = nx * ny * nz;
                grad[i] = [dx * ny * nz, nx * dy * nz, nx * ny * dz];
            }
        }
        (2, ElemFamily::Serendipity) => {
            for (i, loc) in locs.iter().enumerate() {
                let [xi_i, eta_i, zeta_i] = *loc;
                if i < 8 {
                    let (a, b, c) = (xi * xi_i, eta * eta_i, zeta * zeta_i);
                    phi[i] = 0.125 * (1.0 + a) * (1.0 + b) * (1.0 + c) * (a + b + c - 2.0);
                    grad[i] = [
                        0.125 * xi_i * (1.0 + b) * (1.0 + c) * (2.0 * a + b + c - 1.0),
                        0.125 * eta_i * (1.0 + a) * (1.0 + c) * (a + 2.0 * b + c - 1.0),
                        0.125 * zeta_i * (1.0 + a) * (1.0 + b) * (a + b + 2.0 * c - 1.0),
                    ];
                } else if xi_i == 0.0 {
                    let (b, c) = (eta * eta_i, zeta * zeta_i);
                    phi[i] = 0.25 * (1.0 - xi * xi) * (1.0 + b) * (1.0 + c);
                    grad[i] = [
                        -0.5 * xi * (1.0 + b) * (1.0 + c),
                        0.25 * eta_i * (1.0 - xi * xi) * (1.0 + c),
                        0.25 * zeta_i * (1.0 - xi * xi) * (1.0 + b),
                    ];
                } else if eta_i == 0.0 {
                    let (a, c) = (xi * xi_i, zeta * zeta_i);
                    phi[i] = 0.25 * (1.0 - eta * eta) * (1.0 + a) * (1.0 + c);
                    grad[i] = [
                        0.25 * xi_i * (1.0 - eta * eta) * (1.0 + c),
                        -0.5 * eta * (1.0 + a) * (1.0 + c),
                        0.25 * zeta_i * (1.0 - eta * eta) * (1.0 + a),
                    ];
                } else {
                    let (a, b) = (xi * xi_i, eta * eta_i);
                    phi[i] = 0.25 * (1.0 - zeta * zeta) * (1.0 + a) * (1.0 + b);
                    grad[i] = [
                        0.25 * xi_i * (1.0 - zeta * zeta) * (1.0 + b),
                        0.25 * eta_i * (1.0 - zeta * zeta) * (1.0 + a),
                        -0.5 * zeta * (1.0 + a) * (1.0 + b),
                    ];
                }
            }
        }
        (3, ElemFamily::Serendipity) => {
            for (i, loc) in locs.iter().enumerate() {
                let [xi_i, eta_i, zeta_i] = *loc;
                if i < 8 {
                    let (a, b, c) = (xi * xi_i, eta * eta_i, zeta * zeta_i);
                    let r2 = 9.0 * (xi * xi + eta * eta + zeta * zeta) - 19.0;
                    phi[i] = (1.0 + a) * (1.0 + b) * (1.0 + c) * r2 / 64.0;
                    grad[i] = [
                        ((1.0 + b) * (1.0 + c) * (xi_i * r2 + (1.0 + a) * 18.0 * xi)) / 64.0,
                        ((1.0 + a) * (1.0 + c) * (eta_i * r2 + (1.0 + b) * 18.0 * eta)) / 64.0,
                        ((1.0 + a) * (1.0 + b) * (zeta_i * r2 + (1.0 + c) * 18.0 * zeta)) / 64.0,
                    ];
                } else if xi_i.abs() < 0.5 {
                    // Edge node varying along xi, at xi_i = +-1/3.
                    let (b, c) = (eta * eta_i, zeta * zeta_i);
                    let q = 1.0 + 9.0 * xi * xi_i;
                    let s = 1.0 - xi * xi;
                    phi[i] = 9.0 / 64.0 * s * q * (1.0 + b) * (1.0 + c);
                    grad[i] = [
                        9.0 / 64.0 * (1.0 + b) * (1.0 + c) * (-2.0 * xi * q + s * 9.0 * xi_i),
                        9.0 / 64.0 * s * q * eta_i * (1.0 + c),
                        9.0 / 64.0 * s * q * (1.0 + b) * zeta_i,
                    ];
                } else if eta_i.abs() < 0.5 {
                    let (a, c) = (xi * xi_i, zeta * zeta_i);
                    let q = 1.0 + 9.0 * eta * eta_i;
                    let s = 1.0 - eta * eta;
                    phi[i] = 9.0 / 64.0 * s * q * (1.0 + a) * (1.0 + c);
                    grad[i] = [
                        9.0 / 64.0 * s * q * xi_i * (1.0 + c),
                        9.0 / 64.0 * (1.0 + a) * (1.0 + c) * (-2.0 * eta * q + s * 9.0 * eta_i),
                        9.0 / 64.0 * s * q * (1.0 + a) * zeta_i,
                    ];
                } else {
                    let (a, b) = (xi * xi_i, eta * eta_i);
                    let q = 1.0 + 9.0 * zeta * zeta_i;
                    let s = 1.0 - zeta * zeta;
                    phi[i] = 9.0 / 64.0 * s * q * (1.0 + a) * (1.0 + b);
                    grad[i] = [
                        9.0 / 64.0 * s * q * xi_i * (1.0 + b),
                        9.0 / 64.0 * s * q * (1.0 + a) * eta_i,
                        9.0 / 64.0 * (1.0 + a) * (1.0 + b) * (-2.0 * zeta * q + s * 9.0 * zeta_i),
                    ];
                }
            }
        }
        _ => unreachable!("validated by node_count"),
    }
    Ok((phi, grad))
}

/// Gauss-Legendre nodes and weights on [-1, 1].
///
/// Nodes are found by Newton iteration from the Chebyshev estimate; for the
/// small rules used here (n <= 8) this converges to machine precision.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1 && n <= 16, "quadrature order out of range");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            // Evaluate P_n and P_n' by the three-term recurrence.
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = p1;
            let dpn = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = pn / dpn;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0, x);
        for k in 2..=n {
            let kf = k as f64;
            let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
            p0 = p1;
            p1 = p2;
        }
        let dpn = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dpn * dpn);
    }
    (nodes, weights)
}

/// Isotropic linear elastic material with SIMP interpolation parameters.
#[derive(Debug, Clone, Copy)]
pub struct Material {
    /// Young's modulus of solid material.
    pub e0: f64,
    /// Residual modulus of void material (keeps the system definite).
    pub e_min: f64,
    /// Poisson's ratio.
    pub nu: f64,
    /// SIMP penalization exponent.
    pub penal: f64,
}

impl Material {
    /// SIMP modulus: E(rho) = E_min + rho^p (E0 - E_min).
    pub fn simp(&self, rho: f64) -> f64 {
        self.e_min + rho.powf(self.penal) * (self.e0 - self.e_min)
    }

    /// Derivative of the SIMP modulus with respect to rho.
    pub fn simp_deriv(&self, rho: f64) -> f64 {
        self.penal * rho.powf(self.penal - 1.0) * (self.e0 - self.e_min)
    }
}

/// 6x6 constitutive matrix for an isotropic material, Voigt order
/// (xx, yy, zz, yz, xz, xy) with engineering shear strains.
pub fn elasticity_matrix(e: f64, nu: f64) -> DMatrix<f64> {
    let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = e / (2.0 * (1.0 + nu));
    let mut d = DMatrix::zeros(6, 6);
    for i in 0..3 {
        for j in 0..3 {
            d[(i, j)] = if i == j { lambda + 2.0 * mu } else { lambda };
        }
        d[(i + 3, i + 3)] = mu;
    }
    d
}

/// Strain-displacement matrix (6 x 3n) from physical shape gradients,
/// Voigt order (xx, yy, zz, yz, xz, xy).
pub fn strain_displacement(grads: &[[f64; 3]]) -> DMatrix<f64> {
    let n = grads.len();
    let mut b = DMatrix::zeros(6, 3 * n);
    for (i, g) in grads.iter().enumerate() {
        let (c0, c1, c2) = (3 * i, 3 * i + 1, 3 * i + 2);
        b[(0, c0)] = g[0];
        b[(1, c1)] = g[1];
        b[(2, c2)] = g[2];
        b[(3, c1)] = g[2];
        b[(3, c2)] = g[1];
        b[(4, c0)] = g[2];
        b[(4, c2)] = g[0];
        b[(5, c0)] = g[1];
        b[(5, c1)] = g[0];
    }
    b
}

/// Precomputed stiffness integrals of one element type on the unit cube.
///
/// `k_full` is the stiffness of the whole element at unit Young's modulus;
/// `k_sub[i]` integrates the same form over the i-th density sub-box only
/// (x-fastest order), so `sum_i k_sub[i] == k_full` and the element
/// stiffness under a density field is a nonnegative combination of the
/// sub-matrices. Assembly scales them by the SIMP modulus; nothing else in
/// the pipeline re-applies Jacobians or material factors.
#[derive(Debug, Clone)]
pub struct ElementKit {
    pub degree: usize,
    pub family: ElemFamily,
    pub n_mr: usize,
    pub n_nodes: usize,
    pub k_full: DMatrix<f64>,
    pub k_sub: Vec<DMatrix<f64>>,
}

impl ElementKit {
    pub fn new(degree: usize, family: ElemFamily, nu: f64, n_mr: usize) -> Result<ElementKit> {
        if n_mr == 0 {
            return Err(Error::Config("n_mr must be at least 1".into()));
        }
        let n_nodes = node_count(degree, family)?;
        let quad = degree + 1;
        let mut k_sub = Vec::with_capacity(n_mr * n_mr * n_mr);
        for iz in 0..n_mr {
            for iy in 0..n_mr {
                for ix in 0..n_mr {
                    let cell = |i: usize| {
                        let w = 2.0 / n_mr as f64;
                        [-1.0 + w * i as f64, -1.0 + w * (i + 1) as f64]
                    };
                    k_sub.push(stiffness_block(
                        degree,
                        family,
                        nu,
                        [cell(ix), cell(iy), cell(iz)],
                        quad,
                    )?);
                }
            }
        }
        // The full matrix is integrated in one shot, independently of the
        // sub-box decomposition; both integrals are exact for polynomial
        // integrands, so the sub-matrices sum to k_full up to rounding.
        let k_full = stiffness_block(degree, family, nu, [[-1.0, 1.0]; 3], quad)?;
        Ok(ElementKit { degree, family, n_mr, n_nodes, k_full, k_sub })
    }

    /// The full-element integral with a finer quadrature rule, for
    /// verifying that the production rule is already exact.
    pub fn reference_full_refined(
        degree: usize,
        family: ElemFamily,
        nu: f64,
    ) -> Result<DMatrix<f64>> {
        stiffness_block(degree, family, nu, [[-1.0, 1.0]; 3], degree + 2)
    }

    pub fn dofs(&self) -> usize {
        3 * self.n_nodes
    }
}

/// Integral of B' D B over an axis-aligned sub-box of the reference cube,
/// at unit Young's modulus, with `quad` Gauss points per axis.
///
/// The physical element is a unit cube, so physical gradients are twice
/// the reference gradients and the volume element contributes a factor
/// (1/2)^3 (the half-lengths), both folded in here.
fn stiffness_block(
    degree: usize,
    family: ElemFamily,
    nu: f64,
    ranges: [[f64; 2]; 3],
    quad: usize,
) -> Result<DMatrix<f64>> {
    let n_nodes = node_count(degree, family)?;
    let d = elasticity_matrix(1.0, nu);
    let (gp, gw) = gauss_legendre(quad);
    let mut k = DMatrix::zeros(3 * n_nodes, 3 * n_nodes);
    let half = |r: [f64; 2]| 0.5 * (r[1] - r[0]);
    let mid = |r: [f64; 2]| 0.5 * (r[1] + r[0]);
    let jac = half(ranges[0]) * half(ranges[1]) * half(ranges[2]) / 8.0;
    for (iz, &tz) in gp.iter().enumerate() {
        for (iy, &ty) in gp.iter().enumerate() {
            for (ix, &tx) in gp.iter().enumerate() {
                let p = [
                    mid(ranges[0]) + half(ranges[0]) * tx,
                    mid(ranges[1]) + half(ranges[1]) * ty,
                    mid(ranges[2]) + half(ranges[2]) * tz,
                ];
                let (_, grads_ref) = shape_values(degree, family, p)?;
                let grads_phys: Vec<[f64; 3]> = grads_ref
                    .iter()
                    .map(|g| [2.0 * g[0], 2.0 * g[1], 2.0 * g[2]])
                    .collect();
                let b = strain_displacement(&grads_phys);
                let w = gw[ix] * gw[iy] * gw[iz] * jac;
                k.gemm_tr(w, &(d.clone() * &b), &b, 1.0);
            }
        }
    }
    // Symmetrize away rounding drift so downstream symmetry checks are exact.
    let kt = k.transpose();
    Ok(0.5 * (k + kt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const ALL_TYPES: [(usize, ElemFamily); 4] = [
        (1, ElemFamily::Lagrange),
        (2, ElemFamily::Lagrange),
        (2, ElemFamily::Serendipity),
        (3, ElemFamily::Serendipity),
    ];

    #[test]
    fn node_counts_match_family() {
        assert_eq!(node_count(1, ElemFamily::Lagrange).unwrap(), 8);
        assert_eq!(node_count(2, ElemFamily::Lagrange).unwrap(), 27);
        assert_eq!(node_count(2, ElemFamily::Serendipity).unwrap(), 20);
        assert_eq!(node_count(3, ElemFamily::Serendipity).unwrap(), 32);
        assert!(node_count(3, ElemFamily::Lagrange).is_err());
        assert!(node_count(1, ElemFamily::Serendipity).is_err());
        assert!(node_count(4, ElemFamily::Serendipity).is_err());
    }

    #[test]
    fn design_subdivision_caps_follow_element_rank() {
        assert_eq!(max_design_subdivision(1, ElemFamily::Lagrange).unwrap(), 2);
        assert_eq!(max_design_subdivision(2, ElemFamily::Lagrange).unwrap(), 4);
        assert_eq!(max_design_subdivision(2, ElemFamily::Serendipity).unwrap(), 3);
        assert_eq!(max_design_subdivision(3, ElemFamily::Serendipity).unwrap(), 4);
    }

    #[test]
    fn gauss_rules_integrate_polynomials_exactly() {
        // An n-point rule is exact through degree 2n-1.
        for n in 1..=6 {
            let (x, w) = gauss_legendre(n);
            assert_eq!(x.len(), n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
            for p in 0..=(2 * n - 1) {
                let num: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(p as i32)).sum();
                let exact = if p % 2 == 1 { 0.0 } else { 2.0 / (p as f64 + 1.0) };
                assert!(
                    (num - exact).abs() < 1e-13,
                    "n={n} p={p}: {num} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn shape_functions_have_delta_property() {
        for (deg, fam) in ALL_TYPES {
            let locs = local_nodes(deg, fam).unwrap();
            for (i, p) in locs.iter().enumerate() {
                let (phi, _) = shape_values(deg, fam, *p).unwrap();
                for (j, &v) in phi.iter().enumerate() {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!(
                        (v - expect).abs() < 1e-12,
                        "deg {deg} {fam}: phi_{j} at node {i} = {v}"
                    );
                }
            }
        }
    }

    #[test]
    fn shape_functions_partition_unity_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for (deg, fam) in ALL_TYPES {
            for _ in 0..100 {
                let p = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                let (phi, grad) = shape_values(deg, fam, p).unwrap();
                let sum: f64 = phi.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "deg {deg} {fam}: sum {sum}");
                for axis in 0..3 {
                    let gsum: f64 = grad.iter().map(|g| g[axis]).sum();
                    assert!(gsum.abs() < 1e-12, "deg {deg} {fam}: grad sum {gsum}");
                }
            }
        }
    }

    #[test]
    fn shape_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;
        for (deg, fam) in ALL_TYPES {
            for _ in 0..20 {
                let p = [
                    rng.random_range(-0.9..0.9),
                    rng.random_range(-0.9..0.9),
                    rng.random_range(-0.9..0.9),
                ];
                let (_, grad) = shape_values(deg, fam, p).unwrap();
                for axis in 0..3 {
                    let mut pp = p;
                    let mut pm = p;
                    pp[axis] += h;
                    pm[axis] -= h;
                    let (fp, _) = shape_values(deg, fam, pp).unwrap();
                    let (fm, _) = shape_values(deg, fam, pm).unwrap();
                    for i in 0..fp.len() {
                        let fd = (fp[i] - fm[i]) / (2.0 * h);
                        assert!(
                            (grad[i][axis] - fd).abs() < 1e-8,
                            "deg {deg} {fam} node {i} axis {axis}: {} vs {fd}",
                            grad[i][axis]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn elasticity_matrix_limits_and_scaling() {
        // nu = 0 decouples the normal components and halves the shear.
        let d = elasticity_matrix(1.0, 0.0);
        for i in 0..3 {
            assert!((d[(i, i)] - 1.0).abs() < 1e-15);
            assert!((d[(i + 3, i + 3)] - 0.5).abs() < 1e-15);
        }
        assert!(d[(0, 1)].abs() < 1e-15);
        // Linear in the modulus.
        let d1 = elasticity_matrix(1.0, 0.3);
        let d2 = elasticity_matrix(2.0, 0.3);
        assert!((2.0 * &d1 - d2).norm() < 1e-14);
        // Positive definite for admissible Poisson ratios.
        for nu in [0.0, 0.2, 0.3, 0.45] {
            let d = elasticity_matrix(1.0, nu);
            assert!(d.clone().cholesky().is_some(), "nu={nu}");
        }
    }

    #[test]
    fn simp_interpolation_endpoints() {
        let m = Material { e0: 1.0, e_min: 1e-6, nu: 0.3, penal: 3.0 };
        assert!((m.simp(0.0) - 1e-6).abs() < 1e-20);
        assert!((m.simp(1.0) - 1.0).abs() < 1e-15);
        let mid = m.simp(0.5);
        assert!((mid - (1e-6 + 0.125 * (1.0 - 1e-6))).abs() < 1e-15);
        // Derivative against central differences.
        let h = 1e-7;
        let fd = (m.simp(0.5 + h) - m.simp(0.5 - h)) / (2.0 * h);
        assert!((m.simp_deriv(0.5) - fd).abs() < 1e-8);
    }

    #[test]
    fn stiffness_is_symmetric_spsd_with_six_rigid_modes() {
        for (deg, fam) in ALL_TYPES {
            let kit = ElementKit::new(deg, fam, 0.3, 1).unwrap();
            let k = &kit.k_full;
            assert_eq!(k.transpose(), *k);
            let eig = k.clone().symmetric_eigenvalues();
            let max = eig.iter().cloned().fold(0.0_f64, f64::max);
            let small = eig.iter().filter(|&&e| e < 1e-9 * max).count();
            assert_eq!(small, 6, "deg {deg} {fam}: {small} near-null modes");
            assert!(eig.iter().all(|&e| e > -1e-10 * max), "deg {deg} {fam}");
        }
    }

    #[test]
    fn rigid_body_motions_produce_zero_force() {
        for (deg, fam) in ALL_TYPES {
            let kit = ElementKit::new(deg, fam, 0.3, 1).unwrap();
            let locs = local_nodes(deg, fam).unwrap();
            let knorm = kit.k_full.norm();
            // Three translations and three linearized rotations.
            let modes: Vec<Box<dyn Fn([f64; 3]) -> [f64; 3]>> = vec![
                Box::new(|_| [1.0, 0.0, 0.0]),
                Box::new(|_| [0.0, 1.0, 0.0]),
                Box::new(|_| [0.0, 0.0, 1.0]),
                Box::new(|p| [-p[1], p[0], 0.0]),
                Box::new(|p| [0.0, -p[2], p[1]]),
                Box::new(|p| [p[2], 0.0, -p[0]]),
            ];
            for mode in &modes {
                let mut u = nalgebra::DVector::zeros(kit.dofs());
                for (i, p) in locs.iter().enumerate() {
                    let v = mode(*p);
                    u[3 * i] = v[0];
                    u[3 * i + 1] = v[1];
                    u[3 * i + 2] = v[2];
                }
                let f = &kit.k_full * &u;
                assert!(f.norm() < 1e-11 * knorm * u.norm().max(1.0));
            }
        }
    }

    #[test]
    fn uniform_strain_energy_matches_continuum() {
        // Patch test: u = G x gives energy u'Ku = eps' D eps * volume exactly
        // (volume 1 for the unit element).
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for (deg, fam) in ALL_TYPES {
            let kit = ElementKit::new(deg, fam, 0.3, 1).unwrap();
            let locs = local_nodes(deg, fam).unwrap();
            let g: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut u = nalgebra::DVector::zeros(kit.dofs());
            for (i, p) in locs.iter().enumerate() {
                // Physical coordinates: x = (xi + 1)/2 per axis.
                let x = [(p[0] + 1.0) / 2.0, (p[1] + 1.0) / 2.0, (p[2] + 1.0) / 2.0];
                for r in 0..3 {
                    u[3 * i + r] = g[3 * r] * x[0] + g[3 * r + 1] * x[1] + g[3 * r + 2] * x[2];
                }
            }
            let energy = (&kit.k_full * &u).dot(&u);
            let eps = nalgebra::DVector::from_column_slice(&[
                g[0],
                g[4],
                g[8],
                g[5] + g[7],
                g[2] + g[6],
                g[1] + g[3],
            ]);
            let d = elasticity_matrix(1.0, 0.3);
            let exact = (d * &eps).dot(&eps);
            assert!(
                (energy - exact).abs() < 1e-10 * exact.abs().max(1.0),
                "deg {deg} {fam}: {energy} vs {exact}"
            );
        }
    }

    #[test]
    fn sub_boxes_sum_to_full_stiffness() {
        for (deg, fam) in ALL_TYPES {
            for n_mr in [2, 3] {
                let kit = ElementKit::new(deg, fam, 0.3, n_mr).unwrap();
                let mut sum = DMatrix::zeros(kit.dofs(), kit.dofs());
                for k in &kit.k_sub {
                    sum += k;
                }
                let rel = (&sum - &kit.k_full).norm() / kit.k_full.norm();
                assert!(rel < 1e-12, "deg {deg} {fam} n_mr {n_mr}: rel {rel}");
            }
        }
    }

    #[test]
    fn production_quadrature_is_already_exact() {
        for (deg, fam) in ALL_TYPES {
            let kit = ElementKit::new(deg, fam, 0.3, 1).unwrap();
            let refined = ElementKit::reference_full_refined(deg, fam, 0.3).unwrap();
            let rel = (&kit.k_full - &refined).norm() / refined.norm();
            assert!(rel < 1e-12, "deg {deg} {fam}: rel {rel}");
        }
    }

    #[test]
    fn sub_box_scaling_bounds_element_matrix() {
        // With all densities equal the scaled sum collapses to a multiple of
        // the full matrix.
        let kit = ElementKit::new(1, ElemFamily::Lagrange, 0.3, 2).unwrap();
        let m = Material { e0: 1.0, e_min: 1e-6, nu: 0.3, penal: 3.0 };
        let s = m.simp(0.4);
        let mut k = DMatrix::zeros(kit.dofs(), kit.dofs());
        for sub in &kit.k_sub {
            k += sub * s;
        }
        let rel = (&k - &kit.k_full * s).norm() / (kit.k_full.norm() * s);
        assert!(rel < 1e-12);
    }
}
