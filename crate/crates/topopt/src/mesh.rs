//! Structured hexahedral meshes and benchmark problems.
//!
//! Three nested meshes share one box domain of `nelx x nely x nelz` unit
//! cube elements (edges of 1 cm):
//!
//! * the displacement mesh carries the finite elements,
//! * the density mesh subdivides every displacement element into
//!   `n_mr^3` cubes that carry the SIMP densities,
//! * the design mesh subdivides every displacement element into
//!   `d_mr^3` cubes that carry the optimization variables.
//!
//! Elements, density cells, design cells and nodes are all numbered
//! x-fastest, then y, then z. Global node ids are assigned by scanning the
//! degree-refined grid in that order and counting only the positions the
//! element family actually uses, so elements sharing a face agree on the
//! shared node ids by construction.

use std::collections::BTreeMap;

use crate::elements::{self, ElemFamily};
use crate::{Error, Result};

/// Geometric description of the mesh triple.
#[derive(Debug, Clone, Copy)]
pub struct MeshSpec {
    pub nelx: usize,
    pub nely: usize,
    pub nelz: usize,
    /// Density subdivisions per displacement element edge.
    pub n_mr: usize,
    /// Design-variable subdivisions per displacement element edge.
    pub d_mr: usize,
    /// Polynomial degree of the displacement elements.
    pub degree: usize,
    pub family: ElemFamily,
}

impl MeshSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nelx == 0 || self.nely == 0 || self.nelz == 0 {
            return Err(Error::Config("element counts must be positive".into()));
        }
        elements::node_count(self.degree, self.family)?;
        if self.n_mr == 0 || self.d_mr == 0 {
            return Err(Error::Config("n_mr and d_mr must be positive".into()));
        }
        // Either the traditional single-mesh setup (1/1) or a genuine
        // multiresolution setup with a coarser-or-equal design mesh.
        if self.d_mr > self.n_mr {
            return Err(Error::Config(format!(
                "d_mr = {} must not exceed n_mr = {}",
                self.d_mr, self.n_mr
            )));
        }
        if self.n_mr > 1 && self.d_mr == 1 {
            return Err(Error::Config(
                "multiresolution runs need d_mr >= 2 (d_mr = 1 is reserved for n_mr = 1)".into(),
            ));
        }
        let cap = elements::max_design_subdivision(self.degree, self.family)?;
        if self.d_mr > cap {
            log::warn!(
                "d_mr = {} exceeds the informative cap {} for degree-{} {} elements; \
                 sub-element stiffness contributions are no longer independent",
                self.d_mr,
                cap,
                self.degree,
                self.family
            );
        }
        Ok(())
    }

    pub fn n_elems(&self) -> usize {
        self.nelx * self.nely * self.nelz
    }

    /// Density grid dimensions (cells per axis).
    pub fn density_dims(&self) -> [usize; 3] {
        [self.nelx * self.n_mr, self.nely * self.n_mr, self.nelz * self.n_mr]
    }

    pub fn n_density(&self) -> usize {
        let d = self.density_dims();
        d[0] * d[1] * d[2]
    }

    /// Design grid dimensions (cells per axis).
    pub fn design_dims(&self) -> [usize; 3] {
        [self.nelx * self.d_mr, self.nely * self.d_mr, self.nelz * self.d_mr]
    }

    pub fn n_design(&self) -> usize {
        let d = self.design_dims();
        d[0] * d[1] * d[2]
    }

    /// Volume of one density cell in cm^3.
    pub fn density_cell_volume(&self) -> f64 {
        1.0 / (self.n_mr * self.n_mr * self.n_mr) as f64
    }

    /// Center of density cell `i` in physical coordinates (cm).
    pub fn density_center(&self, i: usize) -> [f64; 3] {
        let [nx, ny, _] = self.density_dims();
        let (ix, iy, iz) = (i % nx, (i / nx) % ny, i / (nx * ny));
        let h = 1.0 / self.n_mr as f64;
        [(ix as f64 + 0.5) * h, (iy as f64 + 0.5) * h, (iz as f64 + 0.5) * h]
    }

    /// Center of design cell `k` in physical coordinates (cm).
    pub fn design_center(&self, k: usize) -> [f64; 3] {
        let [nx, ny, _] = self.design_dims();
        let (ix, iy, iz) = (k % nx, (k / nx) % ny, k / (nx * ny));
        let h = 1.0 / self.d_mr as f64;
        [(ix as f64 + 0.5) * h, (iy as f64 + 0.5) * h, (iz as f64 + 0.5) * h]
    }

    /// Displacement element index from its (ex, ey, ez) lattice position.
    pub fn elem_index(&self, ex: usize, ey: usize, ez: usize) -> usize {
        ex + self.nelx * (ey + self.nely * ez)
    }

    /// Global density cell ids inside displacement element `e`, ordered
    /// x-fastest within the element (matching the kit's sub-box order).
    pub fn density_cells_of_elem(&self, e: usize) -> Vec<usize> {
        self.cells_of_elem(e, self.n_mr, self.density_dims())
    }

    /// Global design cell ids inside displacement element `e`.
    pub fn design_cells_of_elem(&self, e: usize) -> Vec<usize> {
        self.cells_of_elem(e, self.d_mr, self.design_dims())
    }

    fn cells_of_elem(&self, e: usize, sub: usize, dims: [usize; 3]) -> Vec<usize> {
        let (ex, ey, ez) = (e % self.nelx, (e / self.nelx) % self.nely, e / (self.nelx * self.nely));
        let mut out = Vec::with_capacity(sub * sub * sub);
        for kz in 0..sub {
            for ky in 0..sub {
                for kx in 0..sub {
                    let gx = ex * sub + kx;
                    let gy = ey * sub + ky;
                    let gz = ez * sub + kz;
                    out.push(gx + dims[0] * (gy + dims[1] * gz));
                }
            }
        }
        out
    }

    /// Displacement element containing density cell `i`.
    pub fn elem_of_density(&self, i: usize) -> usize {
        let [nx, ny, _] = self.density_dims();
        let (ix, iy, iz) = (i % nx, (i / nx) % ny, i / (nx * ny));
        self.elem_index(ix / self.n_mr, iy / self.n_mr, iz / self.n_mr)
    }

    /// Displacement element containing design cell `k`.
    pub fn elem_of_design(&self, k: usize) -> usize {
        let [nx, ny, _] = self.design_dims();
        let (ix, iy, iz) = (k % nx, (k / nx) % ny, k / (nx * ny));
        self.elem_index(ix / self.d_mr, iy / self.d_mr, iz / self.d_mr)
    }
}

/// A concrete mesh: node numbering plus element connectivity.
#[derive(Debug, Clone)]
pub struct MeshTriple {
    pub spec: MeshSpec,
    pub n_nodes: usize,
    pub nodes_per_elem: usize,
    /// Element connectivity, `n_elems * nodes_per_elem`, canonical local order.
    pub conn: Vec<u32>,
    /// Physical node coordinates in cm.
    pub node_coords: Vec<[f64; 3]>,
    /// Degree-refined grid dimensions (points per axis).
    grid_dims: [usize; 3],
    /// Grid position -> node id, `u32::MAX` where the family has no node.
    grid_to_node: Vec<u32>,
}

impl MeshTriple {
    pub fn n_dofs(&self) -> usize {
        3 * self.n_nodes
    }

    pub fn elem_nodes(&self, e: usize) -> &[u32] {
        &self.conn[e * self.nodes_per_elem..(e + 1) * self.nodes_per_elem]
    }

    /// Node id at a refined-grid position, if the family places one there.
    pub fn node_at_grid(&self, gx: usize, gy: usize, gz: usize) -> Option<u32> {
        let [nx, ny, nz] = self.grid_dims;
        if gx >= nx || gy >= ny || gz >= nz {
            return None;
        }
        let id = self.grid_to_node[gx + nx * (gy + ny * gz)];
        (id != u32::MAX).then_some(id)
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        self.grid_dims
    }

    /// Nearest node to a physical point; ties broken toward the lowest
    /// node id. Deterministic placement for point loads and supports.
    pub fn nearest_node(&self, p: [f64; 3]) -> u32 {
        let d = self.spec.degree as f64;
        let [nx, ny, nz] = self.grid_dims;
        let guess = [
            ((p[0] * d).round() as isize).clamp(0, nx as isize - 1) as usize,
            ((p[1] * d).round() as isize).clamp(0, ny as isize - 1) as usize,
            ((p[2] * d).round() as isize).clamp(0, nz as isize - 1) as usize,
        ];
        let r = self.spec.degree as isize;
        let mut best: Option<(f64, u32)> = None;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let g = [
                        guess[0] as isize + dx,
                        guess[1] as isize + dy,
                        guess[2] as isize + dz,
                    ];
                    if g.iter().any(|&v| v < 0) {
                        continue;
                    }
                    let (gx, gy, gz) = (g[0] as usize, g[1] as usize, g[2] as usize);
                    if let Some(id) = self.node_at_grid(gx, gy, gz) {
                        let c = self.node_coords[id as usize];
                        let dist2 = (c[0] - p[0]).powi(2)
                            + (c[1] - p[1]).powi(2)
                            + (c[2] - p[2]).powi(2);
                        let better = match best {
                            None => true,
                            Some((bd, bid)) => {
                                dist2 < bd - 1e-12 || (dist2 < bd + 1e-12 && id < bid)
                            }
                        };
                        if better {
                            best = Some((dist2, id));
                        }
                    }
                }
            }
        }
        best.expect("grid search window always contains a node").1
    }
}

/// Build node numbering and connectivity for a mesh spec.
pub fn build_mesh(spec: MeshSpec) -> Result<MeshTriple> {
    spec.validate()?;
    let d = spec.degree;
    let grid_dims = [spec.nelx * d + 1, spec.nely * d + 1, spec.nelz * d + 1];
    let [gnx, gny, gnz] = grid_dims;

    // A grid position belongs to the serendipity basis if it is interior
    // to an element along at most one axis; the Lagrange basis keeps all.
    let interior = |g: usize| g % d != 0;
    let mut grid_to_node = vec![u32::MAX; gnx * gny * gnz];
    let mut node_coords = Vec::new();
    let mut next = 0u32;
    for gz in 0..gnz {
        for gy in 0..gny {
            for gx in 0..gnx {
                let active = match spec.family {
                    ElemFamily::Lagrange => true,
                    ElemFamily::Serendipity => {
                        let k = [gx, gy, gz].iter().filter(|&&g| interior(g)).count();
                        k <= 1
                    }
                };
                if active {
                    grid_to_node[gx + gnx * (gy + gny * gz)] = next;
                    node_coords.push([
                        gx as f64 / d as f64,
                        gy as f64 / d as f64,
                        gz as f64 / d as f64,
                    ]);
                    next += 1;
                }
            }
        }
    }

    let locals = elements::local_nodes(d, spec.family)?;
    let nodes_per_elem = locals.len();
    // Grid offsets of the local nodes within one element.
    let offsets: Vec<[usize; 3]> = locals
        .iter()
        .map(|p| {
            [
                ((p[0] + 1.0) / 2.0 * d as f64).round() as usize,
                ((p[1] + 1.0) / 2.0 * d as f64).round() as usize,
                ((p[2] + 1.0) / 2.0 * d as f64).round() as usize,
            ]
        })
        .collect();

    let mut conn = Vec::with_capacity(spec.n_elems() * nodes_per_elem);
    for ez in 0..spec.nelz {
        for ey in 0..spec.nely {
            for ex in 0..spec.nelx {
                for off in &offsets {
                    let gx = ex * d + off[0];
                    let gy = ey * d + off[1];
                    let gz = ez * d + off[2];
                    let id = grid_to_node[gx + gnx * (gy + gny * gz)];
                    debug_assert_ne!(id, u32::MAX, "local node must be active");
                    conn.push(id);
                }
            }
        }
    }

    Ok(MeshTriple {
        spec,
        n_nodes: node_coords.len(),
        nodes_per_elem,
        conn,
        node_coords,
        grid_dims,
        grid_to_node,
    })
}

/// The benchmark problems shipped with the tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    /// Cantilever beam: clamped face, point load at the free end.
    Cantilever,
    /// Simply supported beam loaded at the top center.
    Mbb,
    /// L-shaped bracket: hanging from its top face, corner load.
    LShape,
    /// Bridge: four supports, solid deck at mid-height, distributed load.
    Bridge,
}

impl std::str::FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cb" => Ok(Benchmark::Cantilever),
            "mbb" => Ok(Benchmark::Mbb),
            "ls" => Ok(Benchmark::LShape),
            "bd" => Ok(Benchmark::Bridge),
            other => Err(Error::Config(format!(
                "unknown problem '{other}' (expected cb, mbb, ls or bd)"
            ))),
        }
    }
}

impl std::fmt::Display for Benchmark {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Benchmark::Cantilever => write!(f, "cb"),
            Benchmark::Mbb => write!(f, "mbb"),
            Benchmark::LShape => write!(f, "ls"),
            Benchmark::Bridge => write!(f, "bd"),
        }
    }
}

impl Benchmark {
    /// Default volume fraction of the benchmark.
    pub fn default_vol_frac(&self) -> f64 {
        match self {
            Benchmark::Cantilever | Benchmark::Mbb => 0.2,
            Benchmark::LShape => 0.18,
            Benchmark::Bridge => 0.15,
        }
    }
}

/// Geometry knobs of the benchmark family, with conventional defaults.
#[derive(Debug, Clone, Copy)]
pub struct ProblemParams {
    /// Bridge support inset from each bottom corner, in elements
    /// (`None`: one tenth of nelx, rounded).
    pub bridge_inset: Option<usize>,
    /// Bridge deck thickness in displacement element layers.
    pub deck_layers: usize,
    /// L-shape void starts beyond this fraction of nelx...
    pub ls_cut_x: f64,
    /// ...and beyond this fraction of nely.
    pub ls_cut_y: f64,
}

impl Default for ProblemParams {
    fn default() -> Self {
        ProblemParams { bridge_inset: None, deck_layers: 1, ls_cut_x: 0.5, ls_cut_y: 0.5 }
    }
}

/// Supports, loads and passive regions of one benchmark instance.
#[derive(Debug, Clone)]
pub struct BoundaryConditions {
    /// Fixed displacement DOFs, sorted and unique.
    pub fixed_dofs: Vec<u32>,
    /// Nodal loads as (dof, value), sorted by dof.
    pub loads: Vec<(u32, f64)>,
    /// Design variables pinned to 0 (geometric void).
    pub passive_void_design: Vec<u32>,
    /// Design variables pinned to 1 (geometric solid).
    pub passive_solid_design: Vec<u32>,
    /// Density cells inside the void geometry (excluded from the domain).
    pub passive_void_density: Vec<u32>,
    /// Density cells inside the solid geometry.
    pub passive_solid_density: Vec<u32>,
    /// Volume of the designable domain in cm^3 (void geometry excluded).
    pub domain_volume: f64,
    /// Default volume fraction for this problem.
    pub default_vol_frac: f64,
}

impl BoundaryConditions {
    /// Dense load vector over all DOFs.
    pub fn load_vector(&self, n_dofs: usize) -> Vec<f64> {
        let mut f = vec![0.0; n_dofs];
        for &(dof, v) in &self.loads {
            f[dof as usize] += v;
        }
        f
    }
}

/// Construct the boundary conditions of a benchmark on a given mesh.
pub fn apply_problem(
    bench: Benchmark,
    mesh: &MeshTriple,
    params: &ProblemParams,
) -> Result<BoundaryConditions> {
    let spec = &mesh.spec;
    let (nelx, nely, nelz) = (spec.nelx, spec.nely, spec.nelz);
    let mut fixed_nodes: Vec<u32> = Vec::new();
    let mut loads: BTreeMap<u32, f64> = BTreeMap::new();
    let mut bc = BoundaryConditions {
        fixed_dofs: Vec::new(),
        loads: Vec::new(),
        passive_void_design: Vec::new(),
        passive_solid_design: Vec::new(),
        passive_void_density: Vec::new(),
        passive_solid_density: Vec::new(),
        domain_volume: (nelx * nely * nelz) as f64,
        default_vol_frac: bench.default_vol_frac(),
    };
    let [_, gny, gnz] = mesh.grid_dims();

    match bench {
        Benchmark::Cantilever => {
            // Clamp the x = 0 face; unit load down at the midpoint of the
            // bottom edge of the free face.
            for gz in 0..gnz {
                for gy in 0..gny {
                    if let Some(id) = mesh.node_at_grid(0, gy, gz) {
                        fixed_nodes.push(id);
                    }
                }
            }
            let tip = mesh.nearest_node([nelx as f64, 0.0, nelz as f64 / 2.0]);
            *loads.entry(3 * tip + 1).or_insert(0.0) += -1.0;
        }
        Benchmark::Mbb => {
            // Support all bottom-face nodes of the four corner elements of
            // the bottom layer, in all directions; load at the top center.
            for &ex in &[0, nelx - 1] {
                for &ez in &[0, nelz - 1] {
                    let d = spec.degree;
                    for gz in ez * d..=(ez + 1) * d {
                        for gx in ex * d..=(ex + 1) * d {
                            if let Some(id) = mesh.node_at_grid(gx, 0, gz) {
                                fixed_nodes.push(id);
                            }
                        }
                    }
                }
            }
            let top = mesh.nearest_node([nelx as f64 / 2.0, nely as f64, nelz as f64 / 2.0]);
            *loads.entry(3 * top + 1).or_insert(0.0) += -1.0;
        }
        Benchmark::LShape => {
            let cut_x = params.ls_cut_x * nelx as f64;
            let cut_y = params.ls_cut_y * nely as f64;
            let aligned = |v: f64| (v - v.round()).abs() < 1e-9 && v.round() >= 1.0;
            if !aligned(cut_x) || !aligned(cut_y) {
                return Err(Error::Config(format!(
                    "L-shape cut ({}, {}) must land on displacement element boundaries",
                    params.ls_cut_x, params.ls_cut_y
                )));
            }
            let (cut_x, cut_y) = (cut_x.round(), cut_y.round());
            if cut_x as usize >= nelx || cut_y as usize >= nely {
                return Err(Error::Config("L-shape cut leaves no void region".into()));
            }
            // Hang the bracket from the remaining top face (x <= cut).
            let d = spec.degree;
            for gz in 0..gnz {
                for gx in 0..=(cut_x as usize) * d {
                    if let Some(id) = mesh.node_at_grid(gx, gny - 1, gz) {
                        fixed_nodes.push(id);
                    }
                }
            }
            // Load at the center of the right side face of the lower leg.
            let tip = mesh.nearest_node([nelx as f64, cut_y / 2.0, nelz as f64 / 2.0]);
            *loads.entry(3 * tip + 1).or_insert(0.0) += -1.0;
            // Void prism: x > cut_x and y > cut_y.
            let inside = |c: [f64; 3]| c[0] > cut_x && c[1] > cut_y;
            for i in 0..spec.n_density() {
                if inside(spec.density_center(i)) {
                    bc.passive_void_density.push(i as u32);
                }
            }
            for k in 0..spec.n_design() {
                if inside(spec.design_center(k)) {
                    bc.passive_void_design.push(k as u32);
                }
            }
            bc.domain_volume = (nelx * nely * nelz) as f64
                - bc.passive_void_density.len() as f64 * spec.density_cell_volume();
        }
        Benchmark::Bridge => {
            let inset = params
                .bridge_inset
                .unwrap_or_else(|| (nelx as f64 / 10.0).round() as usize);
            if inset >= nelx.div_euclid(2) + 1 || inset >= nelz.div_euclid(2) + 1 {
                return Err(Error::Config(format!(
                    "bridge support inset {inset} does not fit the bottom face"
                )));
            }
            let (lx, lz) = (inset as f64, inset as f64);
            for p in [
                [lx, 0.0, lz],
                [nelx as f64 - lx, 0.0, lz],
                [lx, 0.0, nelz as f64 - lz],
                [nelx as f64 - lx, 0.0, nelz as f64 - lz],
            ] {
                fixed_nodes.push(mesh.nearest_node(p));
            }
            // Solid deck: `deck_layers` element layers starting at mid-height.
            let y0 = nely / 2;
            let y1 = y0 + params.deck_layers;
            if y1 > nely {
                return Err(Error::Config("bridge deck does not fit the domain".into()));
            }
            let inside = |c: [f64; 3]| c[1] > y0 as f64 && c[1] < y1 as f64;
            for i in 0..spec.n_density() {
                if inside(spec.density_center(i)) {
                    bc.passive_solid_density.push(i as u32);
                }
            }
            for k in 0..spec.n_design() {
                if inside(spec.design_center(k)) {
                    bc.passive_solid_design.push(k as u32);
                }
            }
            // Uniform traction of 1 N/cm^2 pulling down on the top surface
            // of the deck, turned into consistent nodal loads face by face.
            let quad = spec.degree + 1;
            let (gp, gw) = elements::gauss_legendre(quad);
            for ez in 0..nelz {
                for ex in 0..nelx {
                    let e = spec.elem_index(ex, y1 - 1, ez);
                    let nodes = mesh.elem_nodes(e);
                    for (iz, &tz) in gp.iter().enumerate() {
                        for (ix, &tx) in gp.iter().enumerate() {
                            let (phi, _) =
                                elements::shape_values(spec.degree, spec.family, [tx, 1.0, tz])?;
                            // Face area element: (1/2)^2 per unit face.
                            let w = gw[ix] * gw[iz] * 0.25;
                            for (l, &n) in nodes.iter().enumerate() {
                                let val = -phi[l] * w;
                                if val != 0.0 {
                                    *loads.entry(3 * n + 1).or_insert(0.0) += val;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fixed_nodes.sort_unstable();
    fixed_nodes.dedup();
    bc.fixed_dofs = fixed_nodes
        .iter()
        .flat_map(|&n| [3 * n, 3 * n + 1, 3 * n + 2])
        .collect();
    bc.loads = loads
        .into_iter()
        .filter(|&(_, v)| v != 0.0)
        .collect();

    // A load on a fixed DOF would silently vanish from the reduced system.
    let mut it = bc.fixed_dofs.iter().peekable();
    for &(dof, _) in &bc.loads {
        while let Some(&&f) = it.peek() {
            if f < dof {
                it.next();
            } else {
                break;
            }
        }
        if it.peek() == Some(&&dof) {
            return Err(Error::Config(format!(
                "benchmark {bench} places a load on fixed DOF {dof}"
            )));
        }
    }
    Ok(bc)
}
