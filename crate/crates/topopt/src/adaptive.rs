//! Degree escalation support: classifying displacement elements as void,
//! solid, or mixed, picking the design variables that can be frozen, and
//! deciding which nodes lose their degrees of freedom.
//!
//! The driver solves with degree-1 elements first, then re-solves at higher
//! degree starting from that field. Elements that are decidedly void or
//! solid, and whose whole neighborhood agrees, have their design variables
//! frozen; nodes touched only by frozen void elements are dropped from the
//! equilibrium systems entirely.

use crate::mesh::{MeshSpec, MeshTriple};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixStrategy {
    /// Never fix anything; plain degree escalation.
    E0,
    /// Fix once, at the entry of each higher-degree stage.
    E1,
    /// Refresh the fixed set at every accepted iteration.
    E2,
    /// Refresh every `refresh_period` accepted iterations.
    E3,
    /// Fix at stage entry and refresh once more at iteration `refresh_period`.
    E4,
}

impl std::str::FromStr for FixStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<FixStrategy> {
        match s.to_ascii_lowercase().as_str() {
            "e0" => Ok(FixStrategy::E0),
            "e1" => Ok(FixStrategy::E1),
            "e2" => Ok(FixStrategy::E2),
            "e3" => Ok(FixStrategy::E3),
            "e4" => Ok(FixStrategy::E4),
            other => Err(Error::Config(format!("unknown fixing strategy '{other}'"))),
        }
    }
}

impl std::fmt::Display for FixStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FixStrategy::E0 => "E0",
            FixStrategy::E1 => "E1",
            FixStrategy::E2 => "E2",
            FixStrategy::E3 => "E3",
            FixStrategy::E4 => "E4",
        };
        f.write_str(s)
    }
}

impl FixStrategy {
    /// Does this strategy (re)select fixed variables when a higher-degree
    /// stage starts?
    pub fn fixes_at_entry(self) -> bool {
        matches!(self, FixStrategy::E1 | FixStrategy::E4)
    }

    /// Does this strategy refresh the fixed set at accepted iteration `k`
    /// of a higher-degree stage?
    pub fn refreshes_at(self, k: usize, period: usize) -> bool {
        debug_assert!(k >= 1 && period >= 1);
        match self {
            FixStrategy::E0 | FixStrategy::E1 => false,
            FixStrategy::E2 => true,
            FixStrategy::E3 => k % period == 0,
            FixStrategy::E4 => k == period,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixConfig {
    /// Density ceiling for a cell to count as void.
    pub rho_lo: f64,
    /// Density floor for a cell to count as solid.
    pub rho_hi: f64,
    /// Gradient slack in the void/solid tests.
    pub eps_grad: f64,
    pub strategy: FixStrategy,
    /// `n` in the E3/E4 schedules.
    pub refresh_period: usize,
    /// Final element degree of the escalation, 2 or 3.
    pub max_degree: usize,
    /// Void stiffness scale used during adaptive runs, relative to E0.
    pub e_min_scale: f64,
}

impl Default for FixConfig {
    fn default() -> FixConfig {
        FixConfig {
            rho_lo: 1e-6,
            rho_hi: 0.9,
            eps_grad: 1e-6,
            strategy: FixStrategy::E4,
            refresh_period: 5,
            max_degree: 2,
            e_min_scale: 1e-9,
        }
    }
}

impl FixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.rho_lo && self.rho_lo < self.rho_hi && self.rho_hi < 1.0) {
            return Err(Error::Config("fixing thresholds must satisfy 0 < lo < hi < 1".into()));
        }
        if self.eps_grad <= 0.0 {
            return Err(Error::Config("the gradient slack must be positive".into()));
        }
        if !(2..=3).contains(&self.max_degree) {
            return Err(Error::Config("the escalation degree must be 2 or 3".into()));
        }
        if self.refresh_period == 0 {
            return Err(Error::Config("the refresh period must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemClass {
    Void,
    Solid,
    Mixed,
}

/// Classify every displacement element. An element is void when all its
/// density cells sit at or below `rho_lo` and none of its design variables
/// would grow along the descent direction (gradient >= -eps); solid is the
/// mirror image at `rho_hi`.
pub fn classify_elements(
    spec: &MeshSpec,
    rho: &[f64],
    design_grad: &[f64],
    cfg: &FixConfig,
) -> Vec<ElemClass> {
    assert_eq!(rho.len(), spec.n_density());
    assert_eq!(design_grad.len(), spec.n_design());
    (0..spec.n_elems())
        .map(|e| {
            let cells = spec.density_cells_of_elem(e);
            let vars = spec.design_cells_of_elem(e);
            if cells.iter().all(|&c| rho[c] <= cfg.rho_lo)
                && vars.iter().all(|&j| design_grad[j] >= -cfg.eps_grad)
            {
                ElemClass::Void
            } else if cells.iter().all(|&c| rho[c] >= cfg.rho_hi)
                && vars.iter().all(|&j| design_grad[j] <= cfg.eps_grad)
            {
                ElemClass::Solid
            } else {
                ElemClass::Mixed
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FixState {
    /// Per design variable: frozen because its element and surroundings are
    /// void.
    pub fixed_void: Vec<bool>,
    /// Per design variable: frozen because its element and surroundings are
    /// solid.
    pub fixed_solid: Vec<bool>,
    /// Nodes (on the current displacement mesh) whose every incident element
    /// is a surrounded void; their DOFs leave the equilibrium system.
    pub suppressed_nodes: Vec<u32>,
}

impl FixState {
    pub fn none(spec: &MeshSpec) -> FixState {
        FixState {
            fixed_void: vec![false; spec.n_design()],
            fixed_solid: vec![false; spec.n_design()],
            suppressed_nodes: Vec::new(),
        }
    }

    /// Combined freeze mask for the optimizer.
    pub fn fixed_mask(&self) -> Vec<bool> {
        self.fixed_void
            .iter()
            .zip(&self.fixed_solid)
            .map(|(a, b)| *a || *b)
            .collect()
    }

    pub fn n_fixed(&self) -> usize {
        self.fixed_mask().iter().filter(|&&b| b).count()
    }
}

/// Freeze design variables of elements whose entire 26-neighborhood shares
/// their class (out-of-domain neighbors count as agreeing), and collect the
/// nodes buried so deep in frozen void that their displacements can be
/// dropped. Nodes in `protected` (supports, load points) are never
/// suppressed.
pub fn select_fixed(mesh: &MeshTriple, class: &[ElemClass], protected: &[u32]) -> FixState {
    let spec = &mesh.spec;
    assert_eq!(class.len(), spec.n_elems());
    let (nelx, nely, nelz) = (spec.nelx, spec.nely, spec.nelz);

    let surrounded = |ex: usize, ey: usize, ez: usize, want: ElemClass| -> bool {
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let (nx, ny, nz) = (ex as i64 + dx, ey as i64 + dy, ez as i64 + dz);
                    if nx < 0 || ny < 0 || nz < 0
                        || nx >= nelx as i64 || ny >= nely as i64 || nz >= nelz as i64
                    {
                        continue;
                    }
                    if class[spec.elem_index(nx as usize, ny as usize, nz as usize)] != want {
                        return false;
                    }
                }
            }
        }
        true
    };

    let mut fixed_void = vec![false; spec.n_design()];
    let mut fixed_solid = vec![false; spec.n_design()];
    let mut elem_void = vec![false; spec.n_elems()];
    for ez in 0..nelz {
        for ey in 0..nely {
            for ex in 0..nelx {
                let e = spec.elem_index(ex, ey, ez);
                let target = match class[e] {
                    ElemClass::Void => &mut fixed_void,
                    ElemClass::Solid => &mut fixed_solid,
                    ElemClass::Mixed => continue,
                };
                if surrounded(ex, ey, ez, class[e]) {
                    for j in spec.design_cells_of_elem(e) {
                        target[j] = true;
                    }
                    if class[e] == ElemClass::Void {
                        elem_void[e] = true;
                    }
                }
            }
        }
    }

    // A node survives if any element touching it still carries stiffness.
    let mut keep = vec![false; mesh.n_nodes];
    for e in 0..spec.n_elems() {
        if !elem_void[e] {
            for &a in mesh.elem_nodes(e) {
                keep[a as usize] = true;
            }
        }
    }
    let mut suppressed: Vec<u32> = (0..mesh.n_nodes as u32)
        .filter(|&a| !keep[a as usize])
        .collect();
    let before = suppressed.len();
    suppressed.retain(|a| !protected.contains(a));
    if suppressed.len() != before {
        log::warn!(
            "{} protected node(s) sit inside frozen void and keep their DOFs",
            before - suppressed.len()
        );
    }
    FixState { fixed_void, fixed_solid, suppressed_nodes: suppressed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elements::ElemFamily;
    use crate::mesh::build_mesh;

    fn spec(nel: [usize; 3], n_mr: usize, d_mr: usize, degree: usize) -> MeshSpec {
        MeshSpec {
            nelx: nel[0],
            nely: nel[1],
            nelz: nel[2],
            n_mr,
            d_mr,
            degree,
            family: ElemFamily::Lagrange,
        }
    }

    #[test]
    fn config_validation() {
        assert!(FixConfig::default().validate().is_ok());
        let mut c = FixConfig::default();
        c.rho_lo = 0.95;
        assert!(c.validate().is_err());
        let mut c = FixConfig::default();
        c.max_degree = 4;
        assert!(c.validate().is_err());
        assert_eq!("e3".parse::<FixStrategy>().unwrap(), FixStrategy::E3);
        assert!("e9".parse::<FixStrategy>().is_err());
    }

    #[test]
    fn classification_follows_density_and_gradient() {
        let sp = spec([2, 1, 1], 2, 1, 1);
        let nd = sp.n_density();
        // Element 0 all near-zero, element 1 all near-one.
        let mut rho = vec![1e-7; nd];
        for c in sp.density_cells_of_elem(1) {
            rho[c] = 0.95;
        }
        // Void needs grad >= -eps; solid needs grad <= eps. A mildly
        // negative gradient (wants denser) still counts as solid.
        let grad = vec![0.0, -1e-3];
        let cls = classify_elements(&sp, &rho, &grad, &FixConfig::default());
        assert_eq!(cls, vec![ElemClass::Void, ElemClass::Solid]);

        // One intermediate density cell spoils the element.
        let mut rho2 = rho.clone();
        rho2[sp.density_cells_of_elem(0)[3]] = 0.5;
        let cls2 = classify_elements(&sp, &rho2, &grad, &FixConfig::default());
        assert_eq!(cls2[0], ElemClass::Mixed);

        // A gradient that wants material in a void element blocks fixing it.
        let cls3 = classify_elements(&sp, &rho, &[-1e-3, 0.0], &FixConfig::default());
        assert_eq!(cls3[0], ElemClass::Mixed);
        // And a gradient that wants to remove material spoils a solid.
        let cls4 = classify_elements(&sp, &rho, &[0.0, 1e-3], &FixConfig::default());
        assert_eq!(cls4[1], ElemClass::Mixed);
    }

    #[test]
    fn isolated_void_is_not_fixed() {
        let sp = spec([3, 3, 3], 1, 1, 1);
        let mesh = build_mesh(sp).unwrap();
        let mut class = vec![ElemClass::Mixed; sp.n_elems()];
        class[sp.elem_index(1, 1, 1)] = ElemClass::Void;
        let fix = select_fixed(&mesh, &class, &[]);
        assert_eq!(fix.n_fixed(), 0);
        assert!(fix.suppressed_nodes.is_empty());
    }

    #[test]
    fn buried_void_fixes_center_and_suppresses_its_body_node() {
        // A 3x3x3 void block inside a 5x5x5 mixed domain: only the block's
        // center has a fully void neighborhood. With quadratic elements the
        // center's body node is the only node untouched by live elements.
        let sp = spec([5, 5, 5], 1, 1, 2);
        let mesh = build_mesh(sp).unwrap();
        let mut class = vec![ElemClass::Mixed; sp.n_elems()];
        for ez in 1..4 {
            for ey in 1..4 {
                for ex in 1..4 {
                    class[sp.elem_index(ex, ey, ez)] = ElemClass::Void;
                }
            }
        }
        let fix = select_fixed(&mesh, &class, &[]);
        let center = sp.elem_index(2, 2, 2);
        let expect: Vec<bool> = (0..sp.n_elems()).map(|e| e == center).collect();
        assert_eq!(fix.fixed_void, expect);
        assert_eq!(fix.n_fixed(), 1);
        // 27-node element: corners touch 8 elements, edge midpoints 4, face
        // midpoints 2, the body node only its own element.
        assert_eq!(fix.suppressed_nodes.len(), 1);
        let body = fix.suppressed_nodes[0];
        let incident = (0..sp.n_elems())
            .filter(|&e| mesh.elem_nodes(e).contains(&body))
            .count();
        assert_eq!(incident, 1);
    }

    #[test]
    fn boundary_voids_count_the_outside_as_void() {
        // An all-void domain fixes everything: out-of-domain neighbors agree
        // with the element class by convention.
        let sp = spec([2, 2, 2], 1, 1, 1);
        let mesh = build_mesh(sp).unwrap();
        let class = vec![ElemClass::Void; sp.n_elems()];
        let fix = select_fixed(&mesh, &class, &[]);
        assert_eq!(fix.n_fixed(), sp.n_design());
        // Every node is buried; all of them go.
        assert_eq!(fix.suppressed_nodes.len(), mesh.n_nodes);
    }

    #[test]
    fn solid_elements_keep_their_nodes() {
        let sp = spec([2, 2, 2], 1, 1, 1);
        let mesh = build_mesh(sp).unwrap();
        let class = vec![ElemClass::Solid; sp.n_elems()];
        let fix = select_fixed(&mesh, &class, &[]);
        assert_eq!(fix.n_fixed(), sp.n_design());
        assert!(fix.fixed_void.iter().all(|&b| !b));
        assert!(fix.suppressed_nodes.is_empty());
    }

    #[test]
    fn protected_nodes_are_never_suppressed() {
        let sp = spec([2, 2, 2], 1, 1, 1);
        let mesh = build_mesh(sp).unwrap();
        let class = vec![ElemClass::Void; sp.n_elems()];
        let fix = select_fixed(&mesh, &class, &[0, 5]);
        assert_eq!(fix.suppressed_nodes.len(), mesh.n_nodes - 2);
        assert!(!fix.suppressed_nodes.contains(&0));
        assert!(!fix.suppressed_nodes.contains(&5));
    }

    #[test]
    fn strategy_schedules() {
        use FixStrategy::*;
        let n = 5;
        assert!(!E0.fixes_at_entry() && !E2.fixes_at_entry() && !E3.fixes_at_entry());
        assert!(E1.fixes_at_entry() && E4.fixes_at_entry());
        for k in 1..=12 {
            assert!(!E0.refreshes_at(k, n));
            assert!(!E1.refreshes_at(k, n));
            assert!(E2.refreshes_at(k, n));
            assert_eq!(E3.refreshes_at(k, n), k % n == 0);
            assert_eq!(E4.refreshes_at(k, n), k == n);
        }
    }
}
