//! Reduced linear systems: assembly on free DOFs, a geometric multigrid
//! preconditioner, and conjugate gradients.
//!
//! Supports and suppressed nodes are handled by row/column elimination, so
//! the assembled matrix is SPD and the multigrid spectrum stays clean. The
//! hierarchy coarsens the displacement grid by halving element counts per
//! axis; prolongation interpolates fine node positions with the coarse
//! element shape functions and every coarser operator is the Galerkin
//! product of the next finer one.

use crate::elements::{shape_values, ElementKit, Material};
use crate::mesh::{build_mesh, MeshSpec, MeshTriple};
use crate::sparse::Csr;
use crate::{Error, Result};
use nalgebra::{Cholesky, DVector, Dyn};
use std::fmt;
use std::str::FromStr;

/// Mapping between the full DOF numbering and the reduced (free) one.
pub struct DofMap {
    free_of_full: Vec<u32>,
    full_of_free: Vec<u32>,
}

impl DofMap {
    pub fn new(n_dofs: usize, eliminated: &[u32]) -> DofMap {
        let mut gone = vec![false; n_dofs];
        for &d in eliminated {
            gone[d as usize] = true;
        }
        let mut free_of_full = vec![u32::MAX; n_dofs];
        let mut full_of_free = Vec::with_capacity(n_dofs);
        for d in 0..n_dofs {
            if !gone[d] {
                free_of_full[d] = full_of_free.len() as u32;
                full_of_free.push(d as u32);
            }
        }
        DofMap { free_of_full, full_of_free }
    }

    pub fn n_full(&self) -> usize {
        self.free_of_full.len()
    }

    pub fn n_free(&self) -> usize {
        self.full_of_free.len()
    }

    pub fn free_index(&self, full: u32) -> Option<u32> {
        let f = self.free_of_full[full as usize];
        (f != u32::MAX).then_some(f)
    }

    pub fn full_index(&self, free: u32) -> u32 {
        self.full_of_free[free as usize]
    }

    pub fn is_free(&self, full: u32) -> bool {
        self.free_of_full[full as usize] != u32::MAX
    }

    /// Restrict a full-length vector to the free DOFs.
    pub fn reduce(&self, full: &[f64]) -> Vec<f64> {
        self.full_of_free.iter().map(|&d| full[d as usize]).collect()
    }

    /// Scatter a free-DOF vector back to full length, zeros elsewhere.
    pub fn expand(&self, free: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.free_of_full.len()];
        for (i, &d) in self.full_of_free.iter().enumerate() {
            full[d as usize] = free[i];
        }
        full
    }
}

/// Symbolic assembly data for one displacement mesh and one eliminated
/// DOF set: the sparsity pattern of the reduced stiffness matrix and a
/// per-element scatter template, so numeric refreshes are pure
/// gather-scatter over the cached sub-element matrices.
pub struct AssemblyMap {
    pub dof_map: DofMap,
    /// Node id -> free node index, `u32::MAX` for eliminated nodes.
    node_free: Vec<u32>,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    /// For element `e` and local node pair `(la, lb)`: position of `lb`'s
    /// 3-column block among the free neighbours of `la`, or `u32::MAX`.
    pair_pos: Vec<u32>,
    npe: usize,
}

pub fn build_assembly_map(mesh: &MeshTriple, eliminated: &[u32]) -> Result<AssemblyMap> {
    let n_nodes = mesh.n_nodes;
    let n_dofs = mesh.n_dofs();
    let mut gone = vec![false; n_dofs];
    for &d in eliminated {
        if d as usize >= n_dofs {
            return Err(Error::Config(format!(
                "eliminated DOF {d} out of range for {n_dofs} DOFs"
            )));
        }
        gone[d as usize] = true;
    }
    // Elimination must cover whole nodes; the scatter template relies on
    // each free node contributing three consecutive reduced DOFs.
    let mut node_free = vec![u32::MAX; n_nodes];
    let mut n_free_nodes = 0u32;
    for a in 0..n_nodes {
        let k = (0..3).filter(|&c| gone[3 * a + c]).count();
        match k {
            0 => {
                node_free[a] = n_free_nodes;
                n_free_nodes += 1;
            }
            3 => {}
            _ => {
                return Err(Error::Config(format!(
                    "node {a} has {k} of 3 DOFs eliminated; whole nodes only"
                )))
            }
        }
    }

    // Free-node adjacency, rows sorted and deduplicated.
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n_free_nodes as usize];
    let npe = mesh.nodes_per_elem;
    for e in 0..mesh.spec.n_elems() {
        let nodes = mesh.elem_nodes(e);
        for &ga in nodes {
            let fa = node_free[ga as usize];
            if fa == u32::MAX {
                continue;
            }
            let row = &mut adj[fa as usize];
            for &gb in nodes {
                let fb = node_free[gb as usize];
                if fb != u32::MAX {
                    row.push(fb);
                }
            }
        }
    }
    for row in &mut adj {
        row.sort_unstable();
        row.dedup();
    }

    let n_rows = 3 * n_free_nodes as usize;
    let mut indptr = Vec::with_capacity(n_rows + 1);
    indptr.push(0usize);
    let nnz: usize = adj.iter().map(|r| 9 * r.len()).sum();
    let mut indices = Vec::with_capacity(nnz);
    for row in &adj {
        for _c in 0..3 {
            for &fb in row {
                for c2 in 0..3u32 {
                    indices.push(3 * fb + c2);
                }
            }
            indptr.push(indices.len());
        }
    }

    let mut pair_pos = vec![u32::MAX; mesh.spec.n_elems() * npe * npe];
    for e in 0..mesh.spec.n_elems() {
        let nodes = mesh.elem_nodes(e);
        let base = e * npe * npe;
        for (la, &ga) in nodes.iter().enumerate() {
            let fa = node_free[ga as usize];
            if fa == u32::MAX {
                continue;
            }
            let row = &adj[fa as usize];
            for (lb, &gb) in nodes.iter().enumerate() {
                let fb = node_free[gb as usize];
                if fb == u32::MAX {
                    continue;
                }
                let pos = row.binary_search(&fb).expect("neighbour in adjacency");
                pair_pos[base + la * npe + lb] = pos as u32;
            }
        }
    }

    Ok(AssemblyMap {
        dof_map: DofMap::new(n_dofs, eliminated),
        node_free,
        indptr,
        indices,
        pair_pos,
        npe,
    })
}

impl AssemblyMap {
    pub fn n_free(&self) -> usize {
        self.indptr.len() - 1
    }

    /// A zero-valued matrix with the reduced stiffness pattern.
    pub fn matrix(&self) -> Csr {
        Csr::from_pattern(
            self.n_free(),
            self.n_free(),
            self.indptr.clone(),
            self.indices.clone(),
        )
    }

    /// Numeric assembly of the reduced stiffness matrix for the given
    /// density field. `a` must come from [`AssemblyMap::matrix`].
    pub fn assemble_into(
        &self,
        mesh: &MeshTriple,
        kit: &ElementKit,
        mat: &Material,
        rho: &[f64],
        a: &mut Csr,
    ) {
        debug_assert_eq!(kit.n_nodes, self.npe);
        debug_assert_eq!(kit.n_mr, mesh.spec.n_mr);
        debug_assert_eq!(a.nnz(), self.indices.len());
        let d = kit.dofs();
        let n_sub = kit.k_sub.len();
        let mut ke = vec![0.0; d * d];
        a.values_mut().fill(0.0);
        for e in 0..mesh.spec.n_elems() {
            let cells = mesh.spec.density_cells_of_elem(e);
            ke.fill(0.0);
            for i in 0..n_sub {
                let s = mat.simp(rho[cells[i]]);
                for (o, v) in ke.iter_mut().zip(kit.k_sub[i].as_slice()) {
                    *o += s * v;
                }
            }
            let nodes = mesh.elem_nodes(e);
            let base = e * self.npe * self.npe;
            let values = a.values_mut();
            for (la, &ga) in nodes.iter().enumerate() {
                let fa = self.node_free[ga as usize];
                if fa == u32::MAX {
                    continue;
                }
                for (lb, _) in nodes.iter().enumerate() {
                    let pos = self.pair_pos[base + la * self.npe + lb];
                    if pos == u32::MAX {
                        continue;
                    }
                    for c in 0..3usize {
                        let row = 3 * fa as usize + c;
                        let vbase = self.indptr[row] + 3 * pos as usize;
                        let kbase = 3 * la + c;
                        for c2 in 0..3usize {
                            values[vbase + c2] += ke[kbase + d * (3 * lb + c2)];
                        }
                    }
                }
            }
        }
    }
}

/// Compliance derivative with respect to each density cell:
/// d f / d rho_i = -simp'(rho_i) u_e^T K_sub[i] u_e, with `u_full` the
/// full-length displacement vector (zeros at eliminated DOFs).
pub fn compliance_density_gradient(
    mesh: &MeshTriple,
    kit: &ElementKit,
    mat: &Material,
    rho: &[f64],
    u_full: &[f64],
) -> Vec<f64> {
    let d = kit.dofs();
    let mut grad = vec![0.0; mesh.spec.n_density()];
    let mut ue = vec![0.0; d];
    for e in 0..mesh.spec.n_elems() {
        for (l, &g) in mesh.elem_nodes(e).iter().enumerate() {
            for c in 0..3 {
                ue[3 * l + c] = u_full[3 * g as usize + c];
            }
        }
        for (i, cell) in mesh.spec.density_cells_of_elem(e).into_iter().enumerate() {
            let k = kit.k_sub[i].as_slice();
            let mut q = 0.0;
            for c in 0..d {
                let col = &k[c * d..(c + 1) * d];
                let mut acc = 0.0;
                for r in 0..d {
                    acc += col[r] * ue[r];
                }
                q += ue[c] * acc;
            }
            grad[cell] = -mat.simp_deriv(rho[cell]) * q;
        }
    }
    grad
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CycleKind {
    V,
    W,
}

impl FromStr for CycleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<CycleKind> {
        match s.to_ascii_lowercase().as_str() {
            "v" => Ok(CycleKind::V),
            "w" => Ok(CycleKind::W),
            other => Err(Error::Config(format!("unknown multigrid cycle '{other}'"))),
        }
    }
}

impl fmt::Display for CycleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CycleKind::V => "v",
            CycleKind::W => "w",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GmgConfig {
    /// Requested number of mesh levels including the finest.
    pub levels: usize,
    pub cycle: CycleKind,
    pub pre_smooth: usize,
    pub post_smooth: usize,
    /// Largest DOF count accepted for the dense coarsest-level factor.
    pub max_dense: usize,
}

impl Default for GmgConfig {
    fn default() -> GmgConfig {
        GmgConfig {
            levels: 4,
            cycle: CycleKind::W,
            pre_smooth: 1,
            post_smooth: 1,
            max_dense: 6000,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Smoother {
    /// Damped Jacobi with the given relaxation factor.
    Jacobi(f64),
    /// Symmetric Gauss-Seidel; used for the higher-degree elements whose
    /// stiffness matrices Jacobi no longer smooths reliably.
    Ssor,
}

/// How many mesh levels the element counts admit (each coarsening halves
/// every axis).
pub fn max_coarsen_levels(spec: &MeshSpec) -> usize {
    let tz = |n: usize| n.trailing_zeros() as usize;
    1 + tz(spec.nelx).min(tz(spec.nely)).min(tz(spec.nelz))
}

/// Grid-dependent part of the multigrid preconditioner: the coarse mesh
/// chain and the interpolation operators. Built once per DOF set and
/// reused across numeric refreshes.
pub struct MgSymbolic {
    /// `prolong[l]` maps level `l+1` DOFs to level `l` DOFs. Level 0 rows
    /// cover only free DOFs; coarser levels keep every node.
    prolong: Vec<Csr>,
    restrict: Vec<Csr>,
    pub levels: usize,
    smoother: Smoother,
    cycle: CycleKind,
    pre_smooth: usize,
    post_smooth: usize,
    max_dense: usize,
}

pub fn build_mg_symbolic(
    mesh: &MeshTriple,
    dof_map: &DofMap,
    cfg: &GmgConfig,
) -> Result<MgSymbolic> {
    if cfg.levels == 0 {
        return Err(Error::Config("multigrid needs at least one level".into()));
    }
    let admissible = max_coarsen_levels(&mesh.spec);
    let levels = cfg.levels.min(admissible);
    if levels < cfg.levels {
        log::warn!(
            "element counts {}x{}x{} admit only {} multigrid levels (requested {})",
            mesh.spec.nelx,
            mesh.spec.nely,
            mesh.spec.nelz,
            levels,
            cfg.levels
        );
    }
    let smoother = if mesh.spec.degree == 1 {
        Smoother::Jacobi(0.5)
    } else {
        Smoother::Ssor
    };

    let mut prolong = Vec::with_capacity(levels - 1);
    let mut restrict = Vec::with_capacity(levels - 1);
    let mut fine_owned: Option<MeshTriple> = None;
    for l in 0..levels - 1 {
        let div = 1usize << (l + 1);
        let coarse = build_mesh(MeshSpec {
            nelx: mesh.spec.nelx / div,
            nely: mesh.spec.nely / div,
            nelz: mesh.spec.nelz / div,
            n_mr: 1,
            d_mr: 1,
            degree: mesh.spec.degree,
            family: mesh.spec.family,
        })?;
        let fine: &MeshTriple = fine_owned.as_ref().unwrap_or(mesh);
        let rows = if l == 0 { Some(dof_map) } else { None };
        let p = prolongation(fine, &coarse, rows)?;
        restrict.push(p.transpose());
        prolong.push(p);
        fine_owned = Some(coarse);
    }

    Ok(MgSymbolic {
        prolong,
        restrict,
        levels,
        smoother,
        cycle: cfg.cycle,
        pre_smooth: cfg.pre_smooth,
        post_smooth: cfg.post_smooth,
        max_dense: cfg.max_dense,
    })
}

/// Interpolation from the coarse node values to the fine nodes, one row
/// per fine DOF (restricted to free DOFs when `rows` is given). Each fine
/// node is located inside one coarse element and weighted with that
/// element's shape functions, so rows sum to 1.
fn prolongation(fine: &MeshTriple, coarse: &MeshTriple, rows: Option<&DofMap>) -> Result<Csr> {
    let n_rows = rows.map_or(fine.n_dofs(), |m| m.n_free());
    let cdims = [coarse.spec.nelx, coarse.spec.nely, coarse.spec.nelz];
    let mut indptr = Vec::with_capacity(n_rows + 1);
    indptr.push(0usize);
    let mut indices: Vec<u32> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut entries: Vec<(u32, f64)> = Vec::new();

    for a in 0..fine.n_nodes {
        let emit: Vec<usize> = (0..3)
            .filter(|&c| rows.is_none_or(|m| m.is_free((3 * a + c) as u32)))
            .collect();
        if emit.is_empty() {
            continue;
        }
        // Coarse elements span two fine element edges; nodes exactly on a
        // coarse boundary land in the right-hand element (clamped at the
        // domain edge), which is immaterial since shape values agree there.
        let mut ce = [0usize; 3];
        let mut xi = [0f64; 3];
        for ax in 0..3 {
            let half = fine.node_coords[a][ax] * 0.5;
            let c = (half + 1e-9).floor().clamp(0.0, (cdims[ax] - 1) as f64);
            ce[ax] = c as usize;
            xi[ax] = 2.0 * (half - c) - 1.0;
        }
        let elem = coarse.spec.elem_index(ce[0], ce[1], ce[2]);
        let cnodes = coarse.elem_nodes(elem);
        let (vals, _) = shape_values(coarse.spec.degree, coarse.spec.family, xi)?;
        entries.clear();
        for (i, &g) in cnodes.iter().enumerate() {
            if vals[i].abs() > 1e-12 {
                entries.push((g, vals[i]));
            }
        }
        entries.sort_unstable_by_key(|&(g, _)| g);
        for &c in &emit {
            for &(g, w) in &entries {
                indices.push(3 * g + c as u32);
                values.push(w);
            }
            indptr.push(indices.len());
        }
    }
    debug_assert_eq!(indptr.len() - 1, n_rows);

    let mut p = Csr::from_pattern(n_rows, coarse.n_dofs(), indptr, indices);
    p.values_mut().copy_from_slice(&values);
    Ok(p)
}

/// Give every row a structural diagonal entry (explicit zero where the
/// Galerkin product produced none).
fn ensure_diagonal(a: Csr) -> Csr {
    let n = a.nrows();
    if (0..n).all(|r| a.find(r, r as u32).is_some()) {
        return a;
    }
    let mut indptr = Vec::with_capacity(n + 1);
    indptr.push(0usize);
    let mut indices = Vec::with_capacity(a.nnz() + n);
    let mut values = Vec::with_capacity(a.nnz() + n);
    for r in 0..n {
        let (cols, vals) = a.row(r);
        let rc = r as u32;
        let mut placed = false;
        for (&c, &v) in cols.iter().zip(vals) {
            if !placed && c > rc {
                indices.push(rc);
                values.push(0.0);
                placed = true;
            }
            if c == rc {
                placed = true;
            }
            indices.push(c);
            values.push(v);
        }
        if !placed {
            indices.push(rc);
            values.push(0.0);
        }
        indptr.push(indices.len());
    }
    let mut out = Csr::from_pattern(n, a.ncols(), indptr, indices);
    out.values_mut().copy_from_slice(&values);
    out
}

/// A coarse node whose entire fine support was eliminated (deep inside a
/// suppressed void) leaves a zero row. The restricted residual there is
/// exactly zero, so pinning the diagonal keeps the level SPD without
/// changing the correction.
fn pin_dead_rows(a: &mut Csr) {
    let diag = a.diagonal();
    let scale = diag.iter().cloned().fold(0.0_f64, f64::max).max(1.0);
    for (r, &d) in diag.iter().enumerate() {
        if d == 0.0 {
            debug_assert!(a.row(r).1.iter().all(|&v| v == 0.0));
            let at = a.find(r, r as u32).expect("structural diagonal");
            a.values_mut()[at] = scale;
        }
    }
}

pub trait Preconditioner {
    fn apply(&self, r: &[f64]) -> Vec<f64>;
}

/// Jacobi (inverse diagonal) preconditioner, the comparison baseline.
pub struct DiagPrecond {
    inv_diag: Vec<f64>,
}

impl DiagPrecond {
    pub fn new(a: &Csr) -> Result<DiagPrecond> {
        let mut inv_diag = a.diagonal();
        for d in &mut inv_diag {
            if *d <= 0.0 {
                return Err(Error::Factorization(
                    "nonpositive diagonal entry; system is not SPD".into(),
                ));
            }
            *d = 1.0 / *d;
        }
        Ok(DiagPrecond { inv_diag })
    }
}

impl Preconditioner for DiagPrecond {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.inv_diag).map(|(v, d)| v * d).collect()
    }
}

/// Numeric side of the multigrid preconditioner, rebuilt whenever the
/// densities change. One application runs a single V or W cycle with
/// symmetric smoothing, which is a fixed SPD operator as PCG requires.
pub struct Mg<'a> {
    a0: &'a Csr,
    symb: &'a MgSymbolic,
    coarse: Vec<Csr>,
    inv_diag: Vec<Vec<f64>>,
    /// Per-level Jacobi damping. Empty when the smoother is SSOR.
    omega: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
}

/// Largest eigenvalue of D^{-1}A for SPD A, estimated by power iteration.
/// The start vector and sweep count are fixed, so repeated builds on the
/// same matrix give bitwise-identical results.
fn jacobi_spectral_bound(a: &Csr, inv_diag: &[f64]) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut z: Vec<f64> = (0..n)
        .map(|i| 1.0 + ((i.wrapping_mul(2654435761)) % 97) as f64 / 96.0)
        .collect();
    let mut az = vec![0.0; n];
    let mut lam = 0.0_f64;
    for _ in 0..30 {
        a.mul_vec(&z, &mut az);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            num += z[i] * az[i];
            den += z[i] * z[i] / inv_diag[i];
        }
        if !(den > 0.0) || !num.is_finite() {
            return 0.0;
        }
        lam = num / den;
        let mut nrm2 = 0.0;
        for i in 0..n {
            z[i] = az[i] * inv_diag[i];
            nrm2 += z[i] * z[i];
        }
        if nrm2 <= 0.0 {
            return 0.0;
        }
        let s = 1.0 / nrm2.sqrt();
        for v in &mut z {
            *v *= s;
        }
    }
    lam
}

pub fn build_mg_numeric<'a>(a0: &'a Csr, symb: &'a MgSymbolic) -> Result<Mg<'a>> {
    let mut coarse: Vec<Csr> = Vec::with_capacity(symb.levels - 1);
    for l in 0..symb.levels - 1 {
        let fine: &Csr = if l == 0 { a0 } else { &coarse[l - 1] };
        let ap = fine.mul_csr(&symb.prolong[l]);
        let mut next = symb.restrict[l].mul_csr(&ap);
        // The product of symmetric operators with R = P^T is symmetric up
        // to rounding; enforce it exactly so the cycle stays a valid
        // preconditioner.
        next.symmetrize();
        let mut next = ensure_diagonal(next);
        pin_dead_rows(&mut next);
        coarse.push(next);
    }

    let coarsest: &Csr = coarse.last().unwrap_or(a0);
    if coarsest.nrows() > symb.max_dense {
        return Err(Error::Config(format!(
            "coarsest multigrid level has {} DOFs, too large for a dense factor; \
             increase the level count",
            coarsest.nrows()
        )));
    }
    let chol = Cholesky::new(coarsest.to_dense()).ok_or_else(|| {
        Error::Factorization("coarsest multigrid level is not positive definite".into())
    })?;

    let mut inv_diag = Vec::with_capacity(symb.levels.saturating_sub(1));
    for l in 0..symb.levels - 1 {
        let a: &Csr = if l == 0 { a0 } else { &coarse[l - 1] };
        let mut d = a.diagonal();
        for v in &mut d {
            if *v <= 0.0 {
                return Err(Error::Factorization(
                    "nonpositive diagonal entry in a multigrid level".into(),
                ));
            }
            *v = 1.0 / *v;
        }
        inv_diag.push(d);
    }

    // Damped Jacobi diverges once omega exceeds 2/lambda_max(D^{-1}A), and
    // a divergent smoother on any level makes the whole (symmetric) cycle
    // indefinite, which PCG rejects outright. On a uniform design every
    // level sits comfortably inside the stability limit, but the spectrum
    // is density-dependent: an isolated stiff element among near-void
    // neighbours barely loads the assembled diagonal while keeping its
    // couplings, and the Galerkin coarse products amplify the effect. So
    // each rebuild measures lambda_max per level and caps the damping only
    // where the nominal value would diverge; everywhere else the
    // configured omega is kept bit-for-bit.
    let mut omega = Vec::new();
    if let Smoother::Jacobi(w0) = symb.smoother {
        omega.reserve(symb.levels - 1);
        for l in 0..symb.levels - 1 {
            let a: &Csr = if l == 0 { a0 } else { &coarse[l - 1] };
            let lam = jacobi_spectral_bound(a, &inv_diag[l]);
            let w = if lam <= 0.0 || w0 * lam < 1.8 { w0 } else { 1.5 / lam };
            if w < w0 {
                log::debug!("mg level {l}: spectral estimate {lam:.2}, jacobi damping {w:.3}");
            }
            omega.push(w);
        }
    }

    Ok(Mg { a0, symb, coarse, inv_diag, omega, chol })
}

impl Mg<'_> {
    pub fn levels(&self) -> usize {
        self.symb.levels
    }

    fn level_matrix(&self, l: usize) -> &Csr {
        if l == 0 {
            self.a0
        } else {
            &self.coarse[l - 1]
        }
    }

    fn smooth(&self, level: usize, b: &[f64], x: &mut [f64]) {
        let a = self.level_matrix(level);
        let inv_diag = &self.inv_diag[level];
        match self.symb.smoother {
            Smoother::Jacobi(_) => a.jacobi_sweep(b, x, inv_diag, self.omega[level]),
            Smoother::Ssor => a.ssor_sweep(b, x, inv_diag),
        }
    }

    /// One cycle of the stationary iteration for `A_level e = b`,
    /// continuing from `x`. Composable: calling it twice realises the
    /// W cycle's doubled coarse visit.
    fn cycle(&self, level: usize, b: &[f64], x: &mut Vec<f64>) {
        let last = self.symb.levels - 1;
        if level == last {
            let sol = self.chol.solve(&DVector::from_column_slice(b));
            x.copy_from_slice(sol.as_slice());
            return;
        }
        let a = self.level_matrix(level);
        for _ in 0..self.symb.pre_smooth {
            self.smooth(level, b, x);
        }
        let mut r = vec![0.0; b.len()];
        a.mul_vec(x, &mut r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        let restrict = &self.symb.restrict[level];
        let mut rc = vec![0.0; restrict.nrows()];
        restrict.mul_vec(&r, &mut rc);
        let mut ec = vec![0.0; rc.len()];
        let revisits = match (self.symb.cycle, level + 1 == last) {
            (CycleKind::W, false) => 2,
            _ => 1,
        };
        for _ in 0..revisits {
            self.cycle(level + 1, &rc, &mut ec);
        }
        let prolong = &self.symb.prolong[level];
        let mut corr = vec![0.0; x.len()];
        prolong.mul_vec(&ec, &mut corr);
        for (xi, ci) in x.iter_mut().zip(&corr) {
            *xi += ci;
        }
        for _ in 0..self.symb.post_smooth {
            self.smooth(level, b, x);
        }
    }
}

impl Preconditioner for Mg<'_> {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; r.len()];
        self.cycle(0, r, &mut x);
        x
    }
}

pub struct SolveStats {
    pub iterations: usize,
    pub rel_residual: f64,
    /// Relative residual after warm start, then after each iteration.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Preconditioned conjugate gradients on the reduced system, warm-started
/// from the incoming `x`. Stops when the relative residual drops below
/// `rel_tol`; exceeding `max_iters` is a hard error carrying the residual
/// history.
pub fn pcg(
    a: &Csr,
    b: &[f64],
    x: &mut [f64],
    m: &dyn Preconditioner,
    rel_tol: f64,
    max_iters: usize,
) -> Result<SolveStats> {
    let n = b.len();
    assert_eq!(a.nrows(), n);
    assert_eq!(x.len(), n);
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.fill(0.0);
        return Ok(SolveStats { iterations: 0, rel_residual: 0.0, history: vec![0.0] });
    }

    let mut r = vec![0.0; n];
    a.mul_vec(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut history = vec![norm(&r) / bnorm];
    if history[0] <= rel_tol {
        return Ok(SolveStats { iterations: 0, rel_residual: history[0], history });
    }

    let mut z = m.apply(&r);
    let mut rz = dot(&r, &z);
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    for it in 1..=max_iters {
        if rz <= 0.0 {
            return Err(Error::LinearSolver(
                "preconditioner is not positive definite".into(),
            ));
        }
        a.mul_vec(&p, &mut q);
        let pq = dot(&p, &q);
        if pq <= 0.0 {
            return Err(Error::LinearSolver(
                "matrix is not positive definite (conjugate direction curvature <= 0)".into(),
            ));
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        let rel = norm(&r) / bnorm;
        history.push(rel);
        if rel <= rel_tol {
            return Ok(SolveStats { iterations: it, rel_residual: rel, history });
        }
        z = m.apply(&r);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }

    let tail: Vec<String> = history
        .iter()
        .rev()
        .take(4)
        .rev()
        .map(|v| format!("{v:.3e}"))
        .collect();
    Err(Error::LinearSolver(format!(
        "PCG exceeded {} iterations (relative residual {:.3e}, history tail [{}])",
        max_iters,
        history.last().unwrap(),
        tail.join(", ")
    )))
}
