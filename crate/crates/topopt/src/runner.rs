//! Whole-run orchestration: the run configuration, the finite element
//! model behind the optimizer callbacks, degree escalation, the
//! thresholding stage, corrected compliance and result files.
//!
//! A run goes through up to three phases:
//!
//! 1. one SLP stage per element degree (a single stage unless the mode is
//!    adaptive, in which case degree 1 is solved first and the fixing
//!    strategy governs what gets frozen on the way up),
//! 2. the thresholding quality loop, which projects the converged field
//!    to 0/1 and re-runs the SLP from the projection until two
//!    consecutive projections agree,
//! 3. reporting: corrected compliances on the fine density mesh, the
//!    density census, timing, and the files under the output directory.

use std::path::PathBuf;
use std::time::Instant;

use crate::adaptive::{classify_elements, select_fixed, FixConfig, FixState};
use crate::elements::{ElemFamily, ElementKit, Material};
use crate::filter::FilterPlan;
use crate::io::{write_density_bin, write_density_vtk, CsvLog};
use crate::linsolve::{
    build_assembly_map, build_mg_numeric, build_mg_symbolic, compliance_density_gradient, pcg,
    AssemblyMap, DiagPrecond, GmgConfig, MgSymbolic,
};
use crate::sparse::Csr;
use crate::mesh::{
    apply_problem, build_mesh, Benchmark, BoundaryConditions, MeshSpec, MeshTriple, ProblemParams,
};
use crate::slp::{
    slp_drive, AcceptAction, IterRecord, SlpCallbacks, SlpConfig, SlpInputs, SlpReport, StopReason,
};
use crate::threshold::{quality_loop, ThresholdConfig, ThresholdEnv};
use crate::{Error, Result};

/// Solid Young's modulus. All compliances are relative to it.
const E0: f64 = 1.0;
/// Poisson's ratio of the benchmark material.
const NU: f64 = 0.3;
/// SIMP penalization exponent.
const PENAL: f64 = 3.0;
/// Void stiffness scale outside adaptive runs.
const E_MIN_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// One SLP stage on a single mesh (n_mr = d_mr = 1).
    Traditional,
    /// One SLP stage with refined density/design meshes.
    Multires,
    /// Degree escalation from 1 to the configured degree with void/solid
    /// fixing.
    Adaptive,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s.to_ascii_lowercase().as_str() {
            "trad" => Ok(Mode::Traditional),
            "mr" => Ok(Mode::Multires),
            "adaptive" => Ok(Mode::Adaptive),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected trad, mr or adaptive)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Traditional => "trad",
            Mode::Multires => "mr",
            Mode::Adaptive => "adaptive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precond {
    Gmg,
    Diag,
}

impl std::str::FromStr for Precond {
    type Err = Error;

    fn from_str(s: &str) -> Result<Precond> {
        match s.to_ascii_lowercase().as_str() {
            "gmg" => Ok(Precond::Gmg),
            "diag" => Ok(Precond::Diag),
            other => Err(Error::Config(format!(
                "unknown preconditioner '{other}' (expected gmg or diag)"
            ))),
        }
    }
}

impl std::fmt::Display for Precond {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precond::Gmg => "gmg",
            Precond::Diag => "diag",
        })
    }
}

/// Everything a run needs. Defaults come from the benchmark settings;
/// [`RunConfig::apply_kv`] overlays config-file pairs and the CLI overlays
/// its flags on top of that.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub problem: Benchmark,
    pub nelx: usize,
    pub nely: usize,
    pub nelz: usize,
    /// Volume fraction; `None` picks the benchmark default.
    pub vol_frac: Option<f64>,
    /// Filter radius in density-cell edges.
    pub r_min: f64,
    pub n_mr: usize,
    pub d_mr: usize,
    /// Element degree; in adaptive mode this is the escalation target and
    /// overrides `fix.max_degree`.
    pub degree: usize,
    pub family: ElemFamily,
    pub mode: Mode,
    pub precond: Precond,
    pub mg: GmgConfig,
    pub slp: SlpConfig,
    pub threshold: ThresholdConfig,
    pub fix: FixConfig,
    pub params: ProblemParams,
    /// Relative residual for the equilibrium solves.
    pub pcg_tol: f64,
    pub pcg_max_iters: usize,
    /// Corrected compliance is skipped (and the report marked
    /// uncorrected) when the density mesh has more cells than this.
    pub correction_cap: usize,
    /// Thread budget. Accepted for interface stability; the current
    /// kernels run single-threaded with a fixed reduction order, so
    /// results never depend on it.
    pub threads: usize,
    /// Output directory; `None` runs without writing files.
    pub out_dir: Option<PathBuf>,
    /// Reserved. Every algorithm in the pipeline is deterministic.
    pub seed: u64,
}

impl RunConfig {
    pub fn new(problem: Benchmark) -> RunConfig {
        RunConfig {
            problem,
            nelx: 24,
            nely: 8,
            nelz: 8,
            vol_frac: None,
            r_min: 1.5,
            n_mr: 1,
            d_mr: 1,
            degree: 1,
            family: ElemFamily::Lagrange,
            mode: Mode::Traditional,
            precond: Precond::Gmg,
            mg: GmgConfig::default(),
            slp: SlpConfig::default(),
            threshold: ThresholdConfig::default(),
            fix: FixConfig::default(),
            params: ProblemParams::default(),
            pcg_tol: 1e-8,
            pcg_max_iters: 5000,
            correction_cap: 2_000_000,
            threads: 1,
            out_dir: None,
            seed: 0,
        }
    }

    pub fn resolved_vol_frac(&self) -> f64 {
        self.vol_frac.unwrap_or_else(|| self.problem.default_vol_frac())
    }

    /// Mesh description for one stage. The degree-1 stage of an adaptive
    /// run always uses Lagrange elements (the serendipity family starts
    /// at degree 2).
    pub fn mesh_spec_for(&self, degree: usize) -> MeshSpec {
        MeshSpec {
            nelx: self.nelx,
            nely: self.nely,
            nelz: self.nelz,
            n_mr: self.n_mr,
            d_mr: self.d_mr,
            degree,
            family: if degree == 1 { ElemFamily::Lagrange } else { self.family },
        }
    }

    /// SIMP material of the optimization stages.
    pub fn material(&self) -> Material {
        let scale = match self.mode {
            Mode::Adaptive => self.fix.e_min_scale,
            _ => E_MIN_SCALE,
        };
        Material { e0: E0, e_min: scale * E0, nu: NU, penal: PENAL }
    }

    /// Material for the corrected-compliance evaluation: the plain
    /// fine-mesh settings, independent of the adaptive void scale.
    pub fn correction_material(&self) -> Material {
        Material { e0: E0, e_min: E_MIN_SCALE * E0, nu: NU, penal: PENAL }
    }

    /// Overlay one config-file pair. Unknown keys are an error so typos
    /// do not silently fall back to defaults.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("config key '{key}': cannot parse '{value}'"))
            })
        }
        match key {
            "problem" => self.problem = value.parse()?,
            "nelx" => self.nelx = parse(key, value)?,
            "nely" => self.nely = parse(key, value)?,
            "nelz" => self.nelz = parse(key, value)?,
            "volfrac" => self.vol_frac = Some(parse(key, value)?),
            "rmin" => self.r_min = parse(key, value)?,
            "nmr" => self.n_mr = parse(key, value)?,
            "dmr" => self.d_mr = parse(key, value)?,
            "degree" => self.degree = parse(key, value)?,
            "family" => self.family = value.parse()?,
            "mode" => self.mode = value.parse()?,
            "strategy" => self.fix.strategy = value.parse()?,
            "precond" => self.precond = value.parse()?,
            "mg_levels" => self.mg.levels = parse(key, value)?,
            "mg_cycle" => self.mg.cycle = value.parse()?,
            "mg_pre_smooth" => self.mg.pre_smooth = parse(key, value)?,
            "mg_post_smooth" => self.mg.post_smooth = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "out" => self.out_dir = Some(PathBuf::from(value)),
            "seed" => self.seed = parse(key, value)?,
            "delta0" => self.slp.delta0 = parse(key, value)?,
            "eps_f" => self.slp.eps_f = parse(key, value)?,
            "eps_g" => self.slp.eps_g = parse(key, value)?,
            "eps_s" => self.slp.eps_s = parse(key, value)?,
            "max_outer" => self.slp.max_outer = parse(key, value)?,
            "max_attempts" => self.threshold.max_attempts = parse(key, value)?,
            "eps_n" => self.threshold.eps_n = parse(key, value)?,
            "eps_v" => self.threshold.eps_v = parse(key, value)?,
            "beta0" => self.threshold.beta0 = parse(key, value)?,
            "beta_growth" => self.threshold.beta_growth = parse(key, value)?,
            "beta_max" => self.threshold.beta_max = parse(key, value)?,
            "refresh_period" => self.fix.refresh_period = parse(key, value)?,
            "rho_lo" => self.fix.rho_lo = parse(key, value)?,
            "rho_hi" => self.fix.rho_hi = parse(key, value)?,
            "eps_grad" => self.fix.eps_grad = parse(key, value)?,
            "e_min_scale" => self.fix.e_min_scale = parse(key, value)?,
            "correction_cap" => self.correction_cap = parse(key, value)?,
            "pcg_tol" => self.pcg_tol = parse(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let vf = self.resolved_vol_frac();
        if !(vf > 0.0 && vf < 1.0) {
            return Err(Error::Config(format!(
                "volume fraction must lie in (0, 1), got {vf}"
            )));
        }
        if !(self.r_min > 0.0) {
            return Err(Error::Config("the filter radius must be positive".into()));
        }
        match self.mode {
            Mode::Traditional => {
                if self.n_mr != 1 || self.d_mr != 1 {
                    return Err(Error::Config(
                        "traditional mode runs on a single mesh; use mode mr for n_mr > 1"
                            .into(),
                    ));
                }
            }
            Mode::Multires => {
                if self.n_mr < 2 {
                    return Err(Error::Config(
                        "multiresolution mode needs n_mr >= 2".into(),
                    ));
                }
            }
            Mode::Adaptive => {
                if !(2..=3).contains(&self.degree) {
                    return Err(Error::Config(
                        "adaptive mode escalates from degree 1; ask for degree 2 or 3".into(),
                    ));
                }
            }
        }
        for d in self.stage_degrees() {
            self.mesh_spec_for(d).validate()?;
        }
        self.threshold.validate()?;
        let mut fix = self.fix.clone();
        if self.mode == Mode::Adaptive {
            fix.max_degree = self.degree;
        }
        fix.validate()?;
        if self.slp.max_outer == 0 {
            return Err(Error::Config("the iteration budget must be positive".into()));
        }
        if !(self.slp.eps_f > 0.0 && self.slp.eps_g > 0.0 && self.slp.eps_s > 0.0) {
            return Err(Error::Config("SLP tolerances must be positive".into()));
        }
        if !(self.pcg_tol > 0.0 && self.pcg_tol < 1.0) || self.pcg_max_iters == 0 {
            return Err(Error::Config("bad linear solver settings".into()));
        }
        if self.mg.levels == 0 {
            return Err(Error::Config("multigrid needs at least one level".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("the thread budget must be positive".into()));
        }
        Ok(())
    }

    fn stage_degrees(&self) -> Vec<usize> {
        match self.mode {
            Mode::Adaptive => (1..=self.degree).collect(),
            _ => vec![self.degree],
        }
    }
}

/// Wall-clock seconds per activity. `other` absorbs whatever the named
/// categories do not cover, so the rows sum to `total`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Timing {
    /// Building the filter weights.
    pub pre_filter: f64,
    /// Applying them: density projection and the gradient chain rule.
    pub filter: f64,
    /// Numeric stiffness assembly.
    pub assembly: f64,
    /// Multigrid hierarchy construction and numeric refresh / diagonal
    /// extraction.
    pub precond_setup: f64,
    /// PCG solves.
    pub linear: f64,
    /// Element-level compliance derivatives.
    pub gradients: f64,
    /// The optimizer driver net of model evaluations: LP subproblems and
    /// trust-region bookkeeping.
    pub lp: f64,
    /// Element classification and fixed-set selection.
    pub fixing: f64,
    /// Mesh/element/symbolic setup, I/O, remainder.
    pub other: f64,
    pub total: f64,
}

impl Timing {
    fn merge(&mut self, t: &Timing) {
        self.pre_filter += t.pre_filter;
        self.filter += t.filter;
        self.assembly += t.assembly;
        self.precond_setup += t.precond_setup;
        self.linear += t.linear;
        self.gradients += t.gradients;
        self.lp += t.lp;
        self.fixing += t.fixing;
        self.other += t.other;
    }

    fn named_sum(&self) -> f64 {
        self.pre_filter
            + self.filter
            + self.assembly
            + self.precond_setup
            + self.linear
            + self.gradients
            + self.lp
            + self.fixing
            + self.other
    }
}

fn lap(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64()
}

/// Counts of exactly-0, intermediate, and exactly-1 densities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Census {
    pub void: usize,
    pub intermediate: usize,
    pub solid: usize,
}

impl Census {
    pub fn of(rho: &[f64]) -> Census {
        let mut c = Census { void: 0, intermediate: 0, solid: 0 };
        for &v in rho {
            if v == 0.0 {
                c.void += 1;
            } else if v == 1.0 {
                c.solid += 1;
            } else {
                c.intermediate += 1;
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.void + self.intermediate + self.solid
    }
}

/// How a completed run ended. Hard failures (bad config, solver
/// breakdown, I/O) surface as errors instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Converged,
    /// An SLP stage exhausted its outer-iteration budget; the pipeline
    /// stopped there and the report carries the unconverged field.
    IterationCap,
    /// The quality loop ran out of attempts; the report carries its best
    /// projection.
    ThresholdExhausted,
}

impl Outcome {
    /// Process exit code: converged runs exit 0, soft failures get the
    /// same distinct codes as their error counterparts.
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Converged => 0,
            Outcome::IterationCap => 3,
            Outcome::ThresholdExhausted => 4,
        }
    }
}

/// Iteration history of one pipeline stage. All thresholding re-solves
/// merge into a single "prj" entry.
#[derive(Debug, Clone)]
pub struct StageStats {
    pub stage: String,
    pub degree: usize,
    /// Accepted outer iterations.
    pub n_it: usize,
    /// Rejected steps.
    pub n_rs: usize,
    pub stop: StopReason,
    pub records: Vec<IterRecord>,
}

#[derive(Debug, Clone, Copy)]
pub struct ThresholdStats {
    pub attempts: usize,
    pub converged: bool,
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub outcome: Outcome,
    pub stages: Vec<StageStats>,
    /// Compliance of the final (unprojected) solution on the run's own
    /// discretization.
    pub f_raw: f64,
    /// Corrected compliance of the projected field, evaluated with
    /// degree-1 elements on the density mesh. `None` when there is no
    /// projected field or the correction was skipped.
    pub f_prj: Option<f64>,
    /// Corrected compliance of the fully solid domain.
    pub f_sol: Option<f64>,
    /// False when the density mesh exceeded the correction cap and the
    /// corrected values were skipped.
    pub corrected: bool,
    /// Material volume of the final raw field.
    pub volume: f64,
    pub volume_thresholded: Option<f64>,
    pub vol_frac: f64,
    pub domain_volume: f64,
    /// Right-hand side of the volume constraint: vol_frac * domain volume.
    pub budget: f64,
    pub lambda: f64,
    /// Projected-gradient norm at the last accepted iterate.
    pub g_p_inf: f64,
    pub census_raw: Census,
    pub census_thresholded: Option<Census>,
    pub threshold: Option<ThresholdStats>,
    /// Design variables pinned by the geometry or frozen by the fixing
    /// strategy at the end of the run.
    pub fixed_design: usize,
    /// Nodes whose DOFs were suppressed at the end of the run.
    pub suppressed: Vec<u32>,
    /// Final raw density field on the density mesh, x-fastest.
    pub rho: Vec<f64>,
    pub rho_thresholded: Option<Vec<f64>>,
    pub density_dims: [usize; 3],
    pub timing: Timing,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        self.outcome.exit_code()
    }
}

// ---------------------------------------------------------------------
// The finite element model behind the optimizer callbacks.

struct ModelOpts {
    precond: Precond,
    mg: GmgConfig,
    pcg_tol: f64,
    pcg_max: usize,
}

/// One mesh + boundary conditions + filter, with the mutable state of the
/// optimization loop: the current density, displacement (also the warm
/// start), gradients and the reduced equilibrium system.
struct Model {
    mesh: MeshTriple,
    bc: BoundaryConditions,
    kit: ElementKit,
    mat: Material,
    filter: FilterPlan,
    opts: ModelOpts,
    /// Per density cell: false where the geometry pins the density.
    active: Vec<bool>,
    /// Cell volume where active, zero where pinned.
    v_tilde: Vec<f64>,
    /// Per design variable: pinned by the problem geometry.
    pinned_design: Vec<bool>,
    pin_value: Vec<f64>,
    /// Nodes that must never lose their DOFs (supports and loads).
    protected: Vec<u32>,
    /// Volume-constraint gradient over the design variables.
    a: Vec<f64>,
    /// Volume budget left for the non-pinned geometry.
    b: f64,
    suppressed: Vec<u32>,
    amap: AssemblyMap,
    k: Csr,
    mg_symb: Option<MgSymbolic>,
    f_reduced: Vec<f64>,
    u: Vec<f64>,
    rho: Vec<f64>,
    u_full: Vec<f64>,
    density_grad: Vec<f64>,
    design_grad: Vec<f64>,
    compliance: f64,
    last_pcg_iters: usize,
    timing: Timing,
}

impl Model {
    fn new(
        spec: MeshSpec,
        problem: Benchmark,
        params: &ProblemParams,
        r_min: f64,
        mat: Material,
        vol_frac: f64,
        opts: ModelOpts,
    ) -> Result<Model> {
        let mut timing = Timing::default();
        let t0 = Instant::now();
        spec.validate()?;
        let mesh = build_mesh(spec)?;
        let bc = apply_problem(problem, &mesh, params)?;
        let kit = ElementKit::new(spec.degree, spec.family, mat.nu, spec.n_mr)?;
        timing.other += lap(t0);

        let t0 = Instant::now();
        let filter = FilterPlan::build(&spec, r_min)?;
        timing.pre_filter += lap(t0);

        let v_cell = spec.density_cell_volume();
        let mut active = vec![true; spec.n_density()];
        for &i in bc.passive_void_density.iter().chain(&bc.passive_solid_density) {
            active[i as usize] = false;
        }
        let v_tilde: Vec<f64> =
            active.iter().map(|&a| if a { v_cell } else { 0.0 }).collect();
        let mut pinned_design = vec![false; spec.n_design()];
        let mut pin_value = vec![0.0; spec.n_design()];
        for &k in &bc.passive_void_design {
            pinned_design[k as usize] = true;
        }
        for &k in &bc.passive_solid_design {
            pinned_design[k as usize] = true;
            pin_value[k as usize] = 1.0;
        }

        let t0 = Instant::now();
        let a = filter.chain_to_design(&v_tilde);
        timing.filter += lap(t0);
        let solid_volume = bc.passive_solid_density.len() as f64 * v_cell;
        let b = vol_frac * bc.domain_volume - solid_volume;
        let pinned_load: f64 = (0..a.len())
            .filter(|&k| pinned_design[k])
            .map(|k| a[k] * pin_value[k])
            .sum();
        if b - pinned_load < 0.0 {
            return Err(Error::Config(format!(
                "volume fraction {vol_frac} cannot even cover the prescribed solid \
                 geometry (budget {b:.3}, pinned volume {pinned_load:.3})"
            )));
        }

        let mut protected: Vec<u32> = bc
            .fixed_dofs
            .iter()
            .chain(bc.loads.iter().map(|(d, _)| d))
            .map(|&d| d / 3)
            .collect();
        protected.sort_unstable();
        protected.dedup();

        let t0 = Instant::now();
        let amap = build_assembly_map(&mesh, &bc.fixed_dofs)?;
        let k = amap.matrix();
        let f_full = bc.load_vector(mesh.n_dofs());
        let f_reduced = amap.dof_map.reduce(&f_full);
        let u = vec![0.0; f_reduced.len()];
        timing.other += lap(t0);
        let mg_symb = match opts.precond {
            Precond::Gmg => {
                let t0 = Instant::now();
                let s = build_mg_symbolic(&mesh, &amap.dof_map, &opts.mg)?;
                timing.precond_setup += lap(t0);
                Some(s)
            }
            Precond::Diag => None,
        };

        Ok(Model {
            mesh,
            bc,
            kit,
            mat,
            filter,
            opts,
            active,
            v_tilde,
            pinned_design,
            pin_value,
            protected,
            a,
            b,
            suppressed: Vec::new(),
            amap,
            k,
            mg_symb,
            f_reduced,
            u,
            rho: Vec::new(),
            u_full: Vec::new(),
            density_grad: Vec::new(),
            design_grad: Vec::new(),
            compliance: f64::NAN,
            last_pcg_iters: 0,
            timing,
        })
    }

    /// Rebuild the reduced system for a new set of suppressed nodes. The
    /// displacement warm start is dropped because the DOF set changes.
    fn set_suppressed(&mut self, nodes: Vec<u32>) -> Result<()> {
        if nodes == self.suppressed {
            return Ok(());
        }
        let t0 = Instant::now();
        let mut eliminated = self.bc.fixed_dofs.clone();
        eliminated.extend(nodes.iter().flat_map(|&n| [3 * n, 3 * n + 1, 3 * n + 2]));
        eliminated.sort_unstable();
        eliminated.dedup();
        self.amap = build_assembly_map(&self.mesh, &eliminated)?;
        self.k = self.amap.matrix();
        let f_full = self.bc.load_vector(self.mesh.n_dofs());
        self.f_reduced = self.amap.dof_map.reduce(&f_full);
        self.u = vec![0.0; self.f_reduced.len()];
        self.suppressed = nodes;
        self.timing.other += lap(t0);

        if self.opts.precond == Precond::Gmg {
            let t0 = Instant::now();
            self.mg_symb =
                Some(build_mg_symbolic(&self.mesh, &self.amap.dof_map, &self.opts.mg)?);
            self.timing.precond_setup += lap(t0);
        }
        Ok(())
    }

    /// Rebuild the filter with a smaller radius (no-op when `r_new` does
    /// not shrink it). The volume-constraint gradient changes with the
    /// weights.
    fn shrink_filter(&mut self, r_new: f64) -> Result<()> {
        if r_new >= self.filter.r_min() {
            return Ok(());
        }
        let t0 = Instant::now();
        self.filter = FilterPlan::build(&self.mesh.spec, r_new)?;
        self.timing.pre_filter += lap(t0);
        let t0 = Instant::now();
        self.a = self.filter.chain_to_design(&self.v_tilde);
        self.timing.filter += lap(t0);
        Ok(())
    }

    fn apply_passive(&self, rho: &mut [f64]) {
        for &i in &self.bc.passive_void_density {
            rho[i as usize] = 0.0;
        }
        for &i in &self.bc.passive_solid_density {
            rho[i as usize] = 1.0;
        }
    }

    fn apply_design_pins(&self, x: &mut [f64]) {
        for k in 0..x.len() {
            if self.pinned_design[k] {
                x[k] = self.pin_value[k];
            }
        }
    }

    fn initial_design(&self, vol_frac: f64) -> Vec<f64> {
        let mut x = vec![vol_frac; self.mesh.spec.n_design()];
        self.apply_design_pins(&mut x);
        x
    }

    /// Filter, assemble, solve; returns the compliance and leaves the
    /// density, displacement and warm start behind.
    fn evaluate(&mut self, x: &[f64]) -> Result<f64> {
        let t0 = Instant::now();
        let mut rho = self.filter.project(x);
        self.timing.filter += lap(t0);
        self.apply_passive(&mut rho);
        self.rho = rho;

        let t0 = Instant::now();
        self.amap
            .assemble_into(&self.mesh, &self.kit, &self.mat, &self.rho, &mut self.k);
        self.timing.assembly += lap(t0);

        self.last_pcg_iters = solve_reduced(
            &self.k,
            self.opts.precond,
            self.mg_symb.as_ref(),
            &self.f_reduced,
            &mut self.u,
            self.opts.pcg_tol,
            self.opts.pcg_max,
            &mut self.timing,
        )?;
        self.u_full = self.amap.dof_map.expand(&self.u);
        self.compliance = dot(&self.f_reduced, &self.u);
        Ok(self.compliance)
    }

    /// Density and design gradients at the last evaluated point. Pinned
    /// cells do not respond to the design, so their entries are zeroed
    /// before the chain rule.
    fn gradient_refresh(&mut self) {
        let t0 = Instant::now();
        let mut g = compliance_density_gradient(
            &self.mesh,
            &self.kit,
            &self.mat,
            &self.rho,
            &self.u_full,
        );
        for (gi, &act) in g.iter_mut().zip(&self.active) {
            if !act {
                *gi = 0.0;
            }
        }
        self.timing.gradients += lap(t0);
        let t0 = Instant::now();
        self.design_grad = self.filter.chain_to_design(&g);
        self.timing.filter += lap(t0);
        self.density_grad = g;
    }

    /// Gradient of the bound-constrained Lagrangian over the density
    /// cells; zero at pinned cells so projection strategies leave the
    /// prescribed geometry alone.
    fn lagrangian_density_gradient(&self, lambda: f64) -> Vec<f64> {
        self.density_grad
            .iter()
            .zip(&self.v_tilde)
            .map(|(g, v)| g + lambda * v)
            .collect()
    }

    /// Compliance of an explicit density field from a fresh equilibrium
    /// solve (cold start; the optimization warm start is not touched).
    fn compliance_of(&mut self, rho_in: &[f64]) -> Result<f64> {
        let mut rho = rho_in.to_vec();
        self.apply_passive(&mut rho);
        let t0 = Instant::now();
        self.amap
            .assemble_into(&self.mesh, &self.kit, &self.mat, &rho, &mut self.k);
        self.timing.assembly += lap(t0);
        let mut u = vec![0.0; self.f_reduced.len()];
        solve_reduced(
            &self.k,
            self.opts.precond,
            self.mg_symb.as_ref(),
            &self.f_reduced,
            &mut u,
            self.opts.pcg_tol,
            self.opts.pcg_max,
            &mut self.timing,
        )?;
        Ok(dot(&self.f_reduced, &u))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[allow(clippy::too_many_arguments)]
fn solve_reduced(
    k: &Csr,
    precond: Precond,
    symb: Option<&MgSymbolic>,
    f: &[f64],
    u: &mut [f64],
    tol: f64,
    max_iters: usize,
    timing: &mut Timing,
) -> Result<usize> {
    let stats = match precond {
        Precond::Gmg => {
            let t0 = Instant::now();
            let mg = build_mg_numeric(k, symb.expect("multigrid hierarchy present"))?;
            timing.precond_setup += lap(t0);
            let t0 = Instant::now();
            let stats = pcg(k, f, u, &mg, tol, max_iters)?;
            timing.linear += lap(t0);
            stats
        }
        Precond::Diag => {
            let t0 = Instant::now();
            let d = DiagPrecond::new(k)?;
            timing.precond_setup += lap(t0);
            let t0 = Instant::now();
            let stats = pcg(k, f, u, &d, tol, max_iters)?;
            timing.linear += lap(t0);
            stats
        }
    };
    Ok(stats.iterations)
}

/// Scale the free design variables toward zero when the start point
/// overshoots the volume budget (filtered pinned-solid geometry or
/// projection artifacts can leave an excess). Pinned and frozen
/// variables keep their values.
fn enforce_volume_feasible(x: &mut [f64], a: &[f64], b: f64, fixed: &[bool]) {
    let mut held = 0.0;
    let mut free = 0.0;
    for i in 0..x.len() {
        if fixed[i] {
            held += a[i] * x[i];
        } else {
            free += a[i] * x[i];
        }
    }
    let slack = b - held;
    if slack >= 0.0 && free > slack {
        let t = if free > 0.0 { slack / free } else { 0.0 };
        for i in 0..x.len() {
            if !fixed[i] {
                x[i] *= t;
            }
        }
    }
}

/// Mean of a density-mesh field over each design cell, used to turn a
/// projected density back into design variables. Cells are assigned by
/// the position of their centers, which also covers non-nested mesh
/// pairs (e.g. n_mr = 3 with d_mr = 2).
fn design_average(spec: &MeshSpec, field: &[f64]) -> Vec<f64> {
    let [dx, dy, dz] = spec.design_dims();
    let mut sum = vec![0.0; spec.n_design()];
    let mut cnt = vec![0u32; spec.n_design()];
    let s = spec.d_mr as f64;
    for (i, &v) in field.iter().enumerate() {
        let c = spec.density_center(i);
        let kx = ((c[0] * s) as usize).min(dx - 1);
        let ky = ((c[1] * s) as usize).min(dy - 1);
        let kz = ((c[2] * s) as usize).min(dz - 1);
        let k = kx + dx * (ky + dy * kz);
        sum[k] += v;
        cnt[k] += 1;
    }
    sum.iter().zip(&cnt).map(|(s, &c)| s / c as f64).collect()
}

fn or_masks(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(x, y)| *x || *y).collect()
}

// ---------------------------------------------------------------------
// SLP callback adapter.

struct RefreshCtx {
    cfg: FixConfig,
    state: FixState,
    pinned: Vec<bool>,
    protected: Vec<u32>,
}

struct Drive<'a> {
    model: &'a mut Model,
    log: Option<&'a mut CsvLog>,
    stage: &'a str,
    b: f64,
    refresh: Option<RefreshCtx>,
    /// Seconds spent inside callbacks, so the driver's own time (the LP
    /// subproblems) can be measured as the remainder.
    cb_secs: f64,
    row_clock: Instant,
}

impl SlpCallbacks for Drive<'_> {
    fn evaluate(&mut self, x: &[f64]) -> Result<f64> {
        let t0 = Instant::now();
        let r = self.model.evaluate(x);
        self.cb_secs += lap(t0);
        r
    }

    fn gradient(&mut self) -> Result<Vec<f64>> {
        let t0 = Instant::now();
        self.model.gradient_refresh();
        let g = self.model.design_grad.clone();
        self.cb_secs += lap(t0);
        Ok(g)
    }

    fn on_accept(&mut self, k: usize) -> Result<AcceptAction> {
        let t0 = Instant::now();
        let action = self.refresh_fixing(k);
        self.cb_secs += lap(t0);
        action
    }

    fn log(&mut self, rec: &IterRecord) {
        let t0 = Instant::now();
        if let Some(log) = self.log.as_deref_mut() {
            let res = log.row(
                self.stage,
                rec.outer,
                rec.accepted,
                rec.f,
                rec.constraint + self.b,
                rec.g_p_inf,
                rec.delta,
                rec.theta,
                self.model.last_pcg_iters,
                self.row_clock.elapsed().as_secs_f64() * 1e3,
            );
            if let Err(e) = res {
                log::warn!("could not append to the iteration log: {e}");
            }
        }
        self.row_clock = Instant::now();
        self.cb_secs += lap(t0);
    }
}

impl Drive<'_> {
    fn refresh_fixing(&mut self, k: usize) -> Result<AcceptAction> {
        let Some(rc) = self.refresh.as_mut() else {
            return Ok(AcceptAction::default());
        };
        if !rc.cfg.strategy.refreshes_at(k, rc.cfg.refresh_period) {
            return Ok(AcceptAction::default());
        }
        let t0 = Instant::now();
        let class = classify_elements(
            &self.model.mesh.spec,
            &self.model.rho,
            &self.model.design_grad,
            &rc.cfg,
        );
        let new = select_fixed(&self.model.mesh, &class, &rc.protected);
        self.model.timing.fixing += lap(t0);

        let new_mask = or_masks(&rc.pinned, &new.fixed_mask());
        let old_mask = or_masks(&rc.pinned, &rc.state.fixed_mask());
        let mask_changed = new_mask != old_mask;
        let supp_changed = new.suppressed_nodes != self.model.suppressed;
        if supp_changed {
            self.model.set_suppressed(new.suppressed_nodes.clone())?;
        }
        if let Some(log) = self.log.as_deref_mut() {
            let _ = log.comment(&format!(
                "stage {} refresh at k={k}: fixed_void={} fixed_solid={} suppressed={}",
                self.stage,
                new.fixed_void.iter().filter(|&&v| v).count(),
                new.fixed_solid.iter().filter(|&&v| v).count(),
                new.suppressed_nodes.len(),
            ));
        }
        rc.state = new;
        Ok(AcceptAction {
            fixed: mask_changed.then_some(new_mask),
            reevaluate: supp_changed,
        })
    }
}

// ---------------------------------------------------------------------
// Run state shared across stages.

struct Runtime<'c> {
    cfg: &'c RunConfig,
    csv: Option<CsvLog>,
    stages: Vec<StageStats>,
    lambda: f64,
    last_gp: f64,
}

impl Runtime<'_> {
    /// One SLP invocation: compose the fixed mask, keep the start point
    /// inside the volume budget, drive, and leave the model state synced
    /// with the returned iterate. Stats rows with the same stage name
    /// merge (the thresholding re-solves).
    fn solve_stage(
        &mut self,
        model: &mut Model,
        mut x0: Vec<f64>,
        stage: &str,
        slp_cfg: &SlpConfig,
        fix_state: &mut FixState,
        refresh: bool,
    ) -> Result<SlpReport> {
        let n = x0.len();
        let fixed = or_masks(&model.pinned_design, &fix_state.fixed_mask());
        enforce_volume_feasible(&mut x0, &model.a, model.b, &fixed);
        let lower = vec![0.0; n];
        let upper = vec![1.0; n];
        let a = model.a.clone();
        let b = model.b;
        let fix_cfg = self.cfg.fix.clone();
        let pinned = model.pinned_design.clone();
        let protected = model.protected.clone();

        let t0 = Instant::now();
        let mut drive = Drive {
            model,
            log: self.csv.as_mut(),
            stage,
            b,
            refresh: refresh.then(|| RefreshCtx {
                cfg: fix_cfg,
                state: fix_state.clone(),
                pinned,
                protected,
            }),
            cb_secs: 0.0,
            row_clock: Instant::now(),
        };
        let report = slp_drive(
            &mut drive,
            SlpInputs { x0, lower: &lower, upper: &upper, fixed, a: &a, b },
            slp_cfg,
        )?;
        let cb_secs = drive.cb_secs;
        if let Some(rc) = drive.refresh.take() {
            *fix_state = rc.state;
        }
        drop(drive);
        model.timing.lp += (lap(t0) - cb_secs).max(0.0);

        // The model caches the last *evaluated* point; after a run that
        // ended on a rejection it must be pulled back to the accepted
        // iterate before anyone reads densities or gradients.
        if !report.records.last().is_some_and(|r| r.accepted) {
            model.evaluate(&report.x)?;
            model.gradient_refresh();
        }
        self.lambda = report.lambda;
        if let Some(gp) = report.records.iter().rev().find_map(|r| r.g_p_inf) {
            self.last_gp = gp;
        }

        match self.stages.last_mut() {
            Some(last) if last.stage == stage => {
                last.n_it += report.accepted;
                last.n_rs += report.rejected;
                last.stop = report.stop;
                last.records.extend(report.records.iter().cloned());
            }
            _ => self.stages.push(StageStats {
                stage: stage.to_string(),
                degree: model.mesh.spec.degree,
                n_it: report.accepted,
                n_rs: report.rejected,
                stop: report.stop,
                records: report.records.clone(),
            }),
        }
        Ok(report)
    }
}

// ---------------------------------------------------------------------
// Thresholding environment.

struct PrjEnv<'a, 'c> {
    rt: &'a mut Runtime<'c>,
    model: &'a mut Model,
    slp_cfg: SlpConfig,
    fix_state: FixState,
    lagr: Vec<f64>,
    vols: Vec<f64>,
    vf_eff: f64,
}

impl ThresholdEnv for PrjEnv<'_, '_> {
    fn density(&self) -> &[f64] {
        &self.model.rho
    }

    fn lagrangian_gradient(&self) -> &[f64] {
        &self.lagr
    }

    fn volumes(&self) -> &[f64] {
        &self.vols
    }

    fn vol_frac(&self) -> f64 {
        self.vf_eff
    }

    fn resolve_from(&mut self, rho: &[f64]) -> Result<()> {
        // Re-solves run under a filter no wider than 1.1 cell edges so the
        // projected shape is not immediately smeared away again.
        self.model.shrink_filter(1.1)?;
        let mut x0 = design_average(&self.model.mesh.spec, rho);
        for v in &mut x0 {
            *v = v.clamp(0.0, 1.0);
        }
        self.model.apply_design_pins(&mut x0);
        let report = self.rt.solve_stage(
            self.model,
            x0,
            "prj",
            &self.slp_cfg,
            &mut self.fix_state,
            false,
        )?;
        if report.stop == StopReason::IterationLimit {
            return Err(Error::IterationCap(
                "a thresholding re-solve exhausted the outer-iteration budget".into(),
            ));
        }
        self.lagr = self.model.lagrangian_density_gradient(self.rt.lambda);
        Ok(())
    }

    fn compliance_of(&mut self, rho: &[f64]) -> Result<f64> {
        self.model.compliance_of(rho)
    }
}

// ---------------------------------------------------------------------
// Corrected compliance.

/// Compliance of a density field re-evaluated the traditional way: every
/// density cell becomes a degree-1 displacement element, the benchmark
/// boundary conditions are applied to that fine mesh, and the equilibrium
/// system is solved there. Values from runs with different degrees or
/// mesh splits become comparable.
#[allow(clippy::too_many_arguments)]
pub fn corrected_compliance(
    rho: &[f64],
    spec: &MeshSpec,
    problem: Benchmark,
    params: &ProblemParams,
    mat: &Material,
    precond: Precond,
    mg: &GmgConfig,
    pcg_tol: f64,
    pcg_max: usize,
) -> Result<f64> {
    let mut timing = Timing::default();
    corrected_compliance_timed(
        rho, spec, problem, params, mat, precond, mg, pcg_tol, pcg_max, &mut timing,
    )
}

#[allow(clippy::too_many_arguments)]
fn corrected_compliance_timed(
    rho: &[f64],
    spec: &MeshSpec,
    problem: Benchmark,
    params: &ProblemParams,
    mat: &Material,
    precond: Precond,
    mg: &GmgConfig,
    pcg_tol: f64,
    pcg_max: usize,
    timing: &mut Timing,
) -> Result<f64> {
    if rho.len() != spec.n_density() {
        return Err(Error::Config(format!(
            "density field has {} cells, the mesh {}",
            rho.len(),
            spec.n_density()
        )));
    }
    let fine = MeshSpec {
        nelx: spec.nelx * spec.n_mr,
        nely: spec.nely * spec.n_mr,
        nelz: spec.nelz * spec.n_mr,
        n_mr: 1,
        d_mr: 1,
        degree: 1,
        family: ElemFamily::Lagrange,
    };
    let t0 = Instant::now();
    let mesh = build_mesh(fine)?;
    let bc = apply_problem(problem, &mesh, params)?;
    let kit = ElementKit::new(1, ElemFamily::Lagrange, mat.nu, 1)?;
    let amap = build_assembly_map(&mesh, &bc.fixed_dofs)?;
    let mut k = amap.matrix();
    timing.other += lap(t0);

    let t0 = Instant::now();
    amap.assemble_into(&mesh, &kit, mat, rho, &mut k);
    timing.assembly += lap(t0);

    let f_full = bc.load_vector(mesh.n_dofs());
    let f_reduced = amap.dof_map.reduce(&f_full);
    let mut u = vec![0.0; f_reduced.len()];
    let symb = match precond {
        Precond::Gmg => {
            let t0 = Instant::now();
            let s = build_mg_symbolic(&mesh, &amap.dof_map, mg)?;
            timing.precond_setup += lap(t0);
            Some(s)
        }
        Precond::Diag => None,
    };
    solve_reduced(&k, precond, symb.as_ref(), &f_reduced, &mut u, pcg_tol, pcg_max, timing)?;

    // Built from unit-edge elements, the fine mesh spans n_mr times the
    // physical domain; elastic stiffness scales linearly with geometric
    // scale, so the physically sized compliance is n_mr times the value
    // computed here.
    Ok(spec.n_mr as f64 * dot(&f_reduced, &u))
}

// ---------------------------------------------------------------------
// The run itself.

pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let t_run = Instant::now();
    let vol_frac = cfg.resolved_vol_frac();
    let mut fix_cfg_used = cfg.fix.clone();
    if cfg.mode == Mode::Adaptive {
        fix_cfg_used.max_degree = cfg.degree;
    }
    let mat_run = cfg.material();
    let degrees = cfg.stage_degrees();
    if cfg.threads > 1 {
        log::debug!(
            "thread budget {} accepted; kernels run single-threaded deterministic",
            cfg.threads
        );
    }

    let csv = match &cfg.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(CsvLog::create(&dir.join("run.csv"))?)
        }
        None => None,
    };
    let mut rt = Runtime {
        cfg,
        csv,
        stages: Vec::new(),
        lambda: 0.0,
        last_gp: f64::INFINITY,
    };
    let mut acc = Timing::default();
    let mut outcome = Outcome::Converged;

    // Degree stages.
    let mut model_slot: Option<Model> = None;
    let mut x: Vec<f64> = Vec::new();
    let mut fix_state_slot: Option<FixState> = None;
    for (si, &deg) in degrees.iter().enumerate() {
        let final_stage = si + 1 == degrees.len();
        let prev = model_slot.take().map(|m| {
            acc.merge(&m.timing);
            (m.rho, m.design_grad)
        });
        let mut model = Model::new(
            cfg.mesh_spec_for(deg),
            cfg.problem,
            &cfg.params,
            cfg.r_min,
            mat_run,
            vol_frac,
            ModelOpts {
                precond: cfg.precond,
                mg: cfg.mg,
                pcg_tol: cfg.pcg_tol,
                pcg_max: cfg.pcg_max_iters,
            },
        )?;
        if si == 0 {
            x = model.initial_design(vol_frac);
        }
        let stage_name = format!("d{deg}");
        let adaptive_stage = cfg.mode == Mode::Adaptive && deg > 1;

        let mut fix_state = FixState::none(&model.mesh.spec);
        if adaptive_stage && fix_cfg_used.strategy.fixes_at_entry() {
            let (prev_rho, prev_grad) = prev.as_ref().expect("a lower-degree stage ran first");
            let t0 = Instant::now();
            let class = classify_elements(&model.mesh.spec, prev_rho, prev_grad, &fix_cfg_used);
            fix_state = select_fixed(&model.mesh, &class, &model.protected);
            model.timing.fixing += lap(t0);
            if !fix_state.suppressed_nodes.is_empty() {
                model.set_suppressed(fix_state.suppressed_nodes.clone())?;
            }
            if let Some(log) = rt.csv.as_mut() {
                log.comment(&format!(
                    "stage {stage_name} entry fix: fixed_void={} fixed_solid={} suppressed={}",
                    fix_state.fixed_void.iter().filter(|&&v| v).count(),
                    fix_state.fixed_solid.iter().filter(|&&v| v).count(),
                    fix_state.suppressed_nodes.len(),
                ))?;
            }
        }

        let mut slp_cfg = cfg.slp;
        if !final_stage {
            // Intermediate degrees only need a rough solution to classify
            // from; the full tolerance applies at the final degree.
            slp_cfg.eps_g *= 10.0;
        }

        let report = rt.solve_stage(
            &mut model,
            x.clone(),
            &stage_name,
            &slp_cfg,
            &mut fix_state,
            adaptive_stage,
        )?;
        x = report.x;
        let hit_cap = report.stop == StopReason::IterationLimit;
        fix_state_slot = Some(fix_state);
        model_slot = Some(model);
        if hit_cap {
            log::warn!("stage {stage_name} hit the outer-iteration cap; stopping the pipeline");
            outcome = Outcome::IterationCap;
            break;
        }
    }
    let mut model = model_slot.take().expect("at least one stage ran");
    let fix_state = fix_state_slot.take().expect("at least one stage ran");
    let fixed_design = or_masks(&model.pinned_design, &fix_state.fixed_mask())
        .iter()
        .filter(|&&v| v)
        .count();

    // Thresholding stage.
    let mut rho_t: Option<Vec<f64>> = None;
    let mut threshold_stats: Option<ThresholdStats> = None;
    if outcome == Outcome::Converged {
        let v_cell = model.mesh.spec.density_cell_volume();
        let total_v = v_cell * model.mesh.spec.n_density() as f64;
        let solid_volume = model.bc.passive_solid_density.len() as f64 * v_cell;
        let mut env = PrjEnv {
            slp_cfg: cfg.slp,
            fix_state,
            lagr: model.lagrangian_density_gradient(rt.lambda),
            vols: vec![v_cell; model.mesh.spec.n_density()],
            vf_eff: (model.b + solid_volume) / total_v,
            rt: &mut rt,
            model: &mut model,
        };
        match quality_loop(&mut env, &cfg.threshold) {
            Ok(tr) => {
                if tr.fallback {
                    outcome = Outcome::ThresholdExhausted;
                }
                threshold_stats = Some(ThresholdStats {
                    attempts: tr.attempts,
                    converged: tr.converged,
                    fallback: tr.fallback,
                });
                if let Some(log) = rt.csv.as_mut() {
                    for r in &tr.records {
                        log.comment(&format!(
                            "prj attempt {}: beta={} strategy={:?} volume={:.6e} vol_ok={} rel_change={:.3e}",
                            r.attempt, r.beta, r.strategy, r.volume, r.vol_ok, r.rel_change,
                        ))?;
                    }
                }
                rho_t = Some(tr.rho);
            }
            Err(Error::IterationCap(msg)) => {
                log::warn!("{msg}; stopping the pipeline");
                outcome = Outcome::IterationCap;
            }
            Err(e) => return Err(e),
        }
    }

    // Reporting.
    let spec = model.mesh.spec;
    let v_cell = spec.density_cell_volume();
    let f_raw = model.compliance;
    let volume = v_cell * model.rho.iter().sum::<f64>();
    let volume_thresholded = rho_t.as_ref().map(|r| v_cell * r.iter().sum::<f64>());
    let census_raw = Census::of(&model.rho);
    let census_thresholded = rho_t.as_deref().map(Census::of);

    let within_cap = spec.n_density() <= cfg.correction_cap;
    let mat_corr = cfg.correction_material();
    let mut f_prj = None;
    let mut f_sol = None;
    if within_cap && outcome != Outcome::IterationCap {
        if let Some(rt_field) = rho_t.as_deref() {
            f_prj = Some(corrected_compliance_timed(
                rt_field, &spec, cfg.problem, &cfg.params, &mat_corr, cfg.precond, &cfg.mg,
                cfg.pcg_tol, cfg.pcg_max_iters, &mut acc,
            )?);
        }
        let mut solid = vec![1.0; spec.n_density()];
        model.apply_passive(&mut solid);
        f_sol = Some(corrected_compliance_timed(
            &solid, &spec, cfg.problem, &cfg.params, &mat_corr, cfg.precond, &cfg.mg,
            cfg.pcg_tol, cfg.pcg_max_iters, &mut acc,
        )?);
    } else if !within_cap {
        log::warn!(
            "density mesh has {} cells (cap {}); skipping corrected compliance",
            spec.n_density(),
            cfg.correction_cap
        );
    }

    acc.merge(&model.timing);
    let mut report = RunReport {
        outcome,
        stages: std::mem::take(&mut rt.stages),
        f_raw,
        f_prj,
        f_sol,
        corrected: within_cap,
        volume,
        volume_thresholded,
        vol_frac,
        domain_volume: model.bc.domain_volume,
        budget: vol_frac * model.bc.domain_volume,
        lambda: rt.lambda,
        g_p_inf: rt.last_gp,
        census_raw,
        census_thresholded,
        threshold: threshold_stats,
        fixed_design,
        suppressed: model.suppressed.clone(),
        rho: model.rho.clone(),
        rho_thresholded: rho_t,
        density_dims: spec.density_dims(),
        timing: acc,
    };
    report.timing.total = lap(t_run);
    report.timing.other += (report.timing.total - report.timing.named_sum()).max(0.0);

    if let Some(dir) = &cfg.out_dir {
        let spacing = 1.0 / spec.n_mr as f64;
        write_density_vtk(&report.rho, report.density_dims, spacing, &dir.join("density.vtk"))?;
        write_density_bin(&report.rho, report.density_dims, &dir.join("density.bin"))?;
        if let Some(rt_field) = report.rho_thresholded.as_deref() {
            write_density_vtk(
                rt_field,
                report.density_dims,
                spacing,
                &dir.join("density_thresholded.vtk"),
            )?;
        }
        write_summary(&dir.join("summary.txt"), cfg, &report)?;
        if let Some(log) = rt.csv.as_mut() {
            log.flush()?;
        }
    }
    Ok(report)
}

fn stop_str(s: StopReason) -> &'static str {
    match s {
        StopReason::SmallChangeAndStationary => "small change + stationary",
        StopReason::SmallSteps => "small steps",
        StopReason::IterationLimit => "iteration limit",
    }
}

fn write_summary(path: &std::path::Path, cfg: &RunConfig, rep: &RunReport) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    render_summary(&mut w, cfg, rep)?;
    Ok(())
}

/// The human-readable run summary, as written to `summary.txt`.
pub fn render_summary(
    w: &mut dyn std::io::Write,
    cfg: &RunConfig,
    rep: &RunReport,
) -> std::io::Result<()> {
    let spec = cfg.mesh_spec_for(cfg.degree);
    writeln!(
        w,
        "problem {} {}x{}x{}  mode {}  degree {} {}",
        cfg.problem, cfg.nelx, cfg.nely, cfg.nelz, cfg.mode, cfg.degree, spec.family
    )?;
    if cfg.mode == Mode::Adaptive {
        writeln!(
            w,
            "fixing strategy {} (refresh period {})",
            cfg.fix.strategy, cfg.fix.refresh_period
        )?;
    }
    writeln!(
        w,
        "meshes: displacement {}x{}x{}, density n_mr={} ({} cells), design d_mr={} ({} variables)",
        cfg.nelx,
        cfg.nely,
        cfg.nelz,
        cfg.n_mr,
        spec.n_density(),
        cfg.d_mr,
        spec.n_design()
    )?;
    writeln!(
        w,
        "volume fraction {}  filter radius {}  preconditioner {} ({} levels, {} cycle)",
        rep.vol_frac, cfg.r_min, cfg.precond, cfg.mg.levels, cfg.mg.cycle
    )?;
    let outcome = match rep.outcome {
        Outcome::Converged => "converged",
        Outcome::IterationCap => "iteration cap",
        Outcome::ThresholdExhausted => "threshold attempts exhausted",
    };
    writeln!(w, "outcome: {} (exit {})", outcome, rep.exit_code())?;
    writeln!(w)?;
    writeln!(w, "stage  degree  N_it  N_rs  stop")?;
    for s in &rep.stages {
        writeln!(
            w,
            "{:<6} {:<7} {:<5} {:<5} {}",
            s.stage,
            s.degree,
            s.n_it,
            s.n_rs,
            stop_str(s.stop)
        )?;
    }
    writeln!(w)?;
    writeln!(w, "compliance F       {:.9e}", rep.f_raw)?;
    match (rep.corrected, rep.f_prj) {
        (true, Some(f)) => writeln!(w, "corrected F_prj    {f:.9e}")?,
        (true, None) => writeln!(w, "corrected F_prj    (no projected field)")?,
        (false, _) => writeln!(
            w,
            "corrected F_prj    uncorrected (density mesh exceeds correction_cap)"
        )?,
    }
    match (rep.corrected, rep.f_sol) {
        (true, Some(f)) => writeln!(w, "corrected F_sol    {f:.9e}")?,
        (true, None) => writeln!(w, "corrected F_sol    (skipped)")?,
        (false, _) => writeln!(w, "corrected F_sol    uncorrected")?,
    }
    writeln!(
        w,
        "volume {:.6} of {:.6} (budget {:.6}, fraction {:.6})",
        rep.volume,
        rep.domain_volume,
        rep.budget,
        rep.volume / rep.domain_volume
    )?;
    if let Some(v) = rep.volume_thresholded {
        writeln!(w, "volume after projection {v:.6}")?;
    }
    writeln!(w, "lambda {:.6e}  |g_P|_inf {:.6e}", rep.lambda, rep.g_p_inf)?;
    let c = rep.census_raw;
    writeln!(
        w,
        "density census raw:        0: {}  intermediate: {}  1: {}  (of {})",
        c.void,
        c.intermediate,
        c.solid,
        c.total()
    )?;
    if let Some(c) = rep.census_thresholded {
        writeln!(
            w,
            "density census thresholded: 0: {}  intermediate: {}  1: {}  (of {})",
            c.void,
            c.intermediate,
            c.solid,
            c.total()
        )?;
    }
    if let Some(t) = rep.threshold {
        writeln!(
            w,
            "thresholding: {} attempt(s), converged: {}, fallback: {}",
            t.attempts, t.converged, t.fallback
        )?;
    }
    writeln!(
        w,
        "fixing: {} design variables pinned or frozen, {} nodes suppressed",
        rep.fixed_design,
        rep.suppressed.len()
    )?;
    writeln!(w)?;
    writeln!(w, "timing (seconds):")?;
    let t = &rep.timing;
    writeln!(w, "  pre-filtering         {:>10.3}", t.pre_filter)?;
    writeln!(w, "  filtering             {:>10.3}", t.filter)?;
    writeln!(w, "  assembly              {:>10.3}", t.assembly)?;
    writeln!(w, "  preconditioner setup  {:>10.3}", t.precond_setup)?;
    writeln!(w, "  linear systems        {:>10.3}", t.linear)?;
    writeln!(w, "  gradients             {:>10.3}", t.gradients)?;
    writeln!(w, "  LP subproblems        {:>10.3}", t.lp)?;
    writeln!(w, "  fixing                {:>10.3}", t.fixing)?;
    writeln!(w, "  other                 {:>10.3}", t.other)?;
    writeln!(w, "  total                 {:>10.3}", t.total)?;
    writeln!(
        w,
        "timing boundaries: pre-filtering builds the filter weights; filtering \
         applies them (density projection and the gradient chain rule); assembly \
         is the numeric stiffness assembly; preconditioner setup covers multigrid \
         hierarchy construction and per-solve numeric refresh; linear systems \
         is PCG; gradients are the element-level compliance derivatives; LP \
         subproblems is the optimizer driver net of model evaluations \
         (trust-region bookkeeping included); fixing is element classification \
         and fixed-set selection; mesh/element/symbolic setup and I/O land in \
         other, which also absorbs the unattributed remainder."
    )?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_spec(n_mr: usize, d_mr: usize) -> MeshSpec {
        MeshSpec {
            nelx: 1,
            nely: 1,
            nelz: 1,
            n_mr,
            d_mr,
            degree: 1,
            family: ElemFamily::Lagrange,
        }
    }

    fn x_index_field(spec: &MeshSpec) -> Vec<f64> {
        let [nx, _, _] = spec.density_dims();
        (0..spec.n_density()).map(|i| (i % nx) as f64).collect()
    }

    #[test]
    fn design_average_nested_split() {
        // n_mr = 4 over d_mr = 2: each design cell owns a 2x2x2 block.
        let spec = unit_spec(4, 2);
        let avg = design_average(&spec, &x_index_field(&spec));
        let [dx, dy, dz] = spec.design_dims();
        for kz in 0..dz {
            for ky in 0..dy {
                for kx in 0..dx {
                    let want = if kx == 0 { 0.5 } else { 2.5 };
                    assert_eq!(avg[kx + dx * (ky + dy * kz)], want);
                }
            }
        }
    }

    #[test]
    fn design_average_non_nested_split() {
        // n_mr = 3 over d_mr = 2: cell centers sit at 1/6, 1/2 and 5/6,
        // so the halves take one and two density layers per axis.
        let spec = unit_spec(3, 2);
        let avg = design_average(&spec, &x_index_field(&spec));
        let [dx, dy, dz] = spec.design_dims();
        for kz in 0..dz {
            for ky in 0..dy {
                assert_eq!(avg[dx * (ky + dy * kz)], 0.0);
                assert_eq!(avg[1 + dx * (ky + dy * kz)], 1.5);
            }
        }
        let ones = vec![1.0; spec.n_density()];
        for v in design_average(&spec, &ones) {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn design_average_identity_mapping() {
        let spec = unit_spec(2, 2);
        let field = x_index_field(&spec);
        assert_eq!(design_average(&spec, &field), field);
    }

    #[test]
    fn volume_rescue_scales_only_free_variables() {
        let a = [1.0, 1.0, 1.0];
        let mut x = [1.0, 0.5, 0.5];
        enforce_volume_feasible(&mut x, &a, 1.5, &[true, false, false]);
        assert_eq!(x, [1.0, 0.25, 0.25]);

        // Already feasible: untouched.
        let mut x = [0.2, 0.2, 0.2];
        enforce_volume_feasible(&mut x, &a, 1.5, &[false; 3]);
        assert_eq!(x, [0.2, 0.2, 0.2]);

        // Held volume alone exceeds the budget: nothing sensible to do
        // here, leave the point alone for the optimizer to reject.
        let mut x = [1.0, 0.3, 0.3];
        enforce_volume_feasible(&mut x, &a, 0.5, &[true, false, false]);
        assert_eq!(x, [1.0, 0.3, 0.3]);
    }

    #[test]
    fn census_counts_exact_bounds_only() {
        let c = Census::of(&[0.0, 0.0, 1.0, 0.5, 1e-12, 0.999_999]);
        assert_eq!(c, Census { void: 2, intermediate: 3, solid: 1 });
        assert_eq!(c.total(), 6);
    }

    #[test]
    fn kv_overlay_reaches_every_documented_key() {
        let mut cfg = RunConfig::new(Benchmark::Cantilever);
        let pairs = [
            ("problem", "mbb"),
            ("nelx", "48"),
            ("nely", "16"),
            ("nelz", "16"),
            ("volfrac", "0.3"),
            ("rmin", "2.0"),
            ("nmr", "2"),
            ("dmr", "2"),
            ("degree", "2"),
            ("family", "serendipity"),
            ("mode", "mr"),
            ("strategy", "E2"),
            ("precond", "diag"),
            ("mg_levels", "3"),
            ("mg_cycle", "v"),
            ("mg_pre_smooth", "2"),
            ("mg_post_smooth", "2"),
            ("threads", "4"),
            ("out", "/tmp/somewhere"),
            ("seed", "7"),
            ("delta0", "0.15"),
            ("eps_f", "1e-7"),
            ("eps_g", "1e-4"),
            ("eps_s", "1e-9"),
            ("max_outer", "300"),
            ("max_attempts", "6"),
            ("eps_n", "1e-9"),
            ("eps_v", "0.004"),
            ("beta0", "2.0"),
            ("beta_growth", "1.5"),
            ("beta_max", "128.0"),
            ("refresh_period", "25"),
            ("rho_lo", "0.02"),
            ("rho_hi", "0.98"),
            ("eps_grad", "1e-6"),
            ("e_min_scale", "1e-8"),
            ("correction_cap", "100000"),
            ("pcg_tol", "1e-7"),
        ];
        for (k, v) in pairs {
            cfg.apply_kv(k, v).unwrap();
        }
        assert_eq!(cfg.problem, Benchmark::Mbb);
        assert_eq!((cfg.nelx, cfg.nely, cfg.nelz), (48, 16, 16));
        assert_eq!(cfg.vol_frac, Some(0.3));
        assert_eq!(cfg.n_mr, 2);
        assert_eq!(cfg.mode, Mode::Multires);
        assert_eq!(cfg.precond, Precond::Diag);
        assert_eq!(cfg.mg.levels, 3);
        assert_eq!(cfg.slp.max_outer, 300);
        assert_eq!(cfg.threshold.beta_max, 128.0);
        assert_eq!(cfg.fix.refresh_period, 25);
        assert_eq!(cfg.out_dir.as_deref(), Some(std::path::Path::new("/tmp/somewhere")));
        assert_eq!(cfg.pcg_tol, 1e-7);
        cfg.validate().unwrap();

        assert!(cfg.apply_kv("no_such_key", "1").is_err());
        assert!(cfg.apply_kv("nelx", "not-a-number").is_err());
        assert!(cfg.apply_kv("mode", "magic").is_err());
    }

    #[test]
    fn validation_rejects_inconsistent_modes() {
        let mut cfg = RunConfig::new(Benchmark::Cantilever);
        cfg.n_mr = 2;
        cfg.d_mr = 2;
        assert!(cfg.validate().is_err(), "trad with split meshes");

        let mut cfg = RunConfig::new(Benchmark::Cantilever);
        cfg.mode = Mode::Multires;
        assert!(cfg.validate().is_err(), "mr without a mesh split");

        let mut cfg = RunConfig::new(Benchmark::Cantilever);
        cfg.mode = Mode::Adaptive;
        assert!(cfg.validate().is_err(), "adaptive with nothing to escalate");

        // A design mesh finer than the density mesh cannot be averaged
        // back; this must die in validation, not at runtime.
        let mut cfg = RunConfig::new(Benchmark::Cantilever);
        cfg.mode = Mode::Multires;
        cfg.n_mr = 2;
        cfg.d_mr = 3;
        assert!(cfg.validate().is_err(), "d_mr > n_mr");

        let mut cfg = RunConfig::new(Benchmark::Cantilever);
        cfg.vol_frac = Some(1.0);
        assert!(cfg.validate().is_err(), "volume fraction at the boundary");

        let mut cfg = RunConfig::new(Benchmark::Cantilever);
        cfg.threads = 0;
        assert!(cfg.validate().is_err(), "empty thread budget");

        assert!(RunConfig::new(Benchmark::Cantilever).validate().is_ok());
    }

    #[test]
    fn adaptive_stages_escalate_from_degree_one() {
        let mut cfg = RunConfig::new(Benchmark::Cantilever);
        cfg.mode = Mode::Adaptive;
        cfg.degree = 3;
        assert_eq!(cfg.stage_degrees(), vec![1, 2, 3]);
        assert_eq!(cfg.mesh_spec_for(1).family, ElemFamily::Lagrange);
        cfg.family = ElemFamily::Serendipity;
        assert_eq!(cfg.mesh_spec_for(2).family, ElemFamily::Serendipity);
        assert_eq!(cfg.mesh_spec_for(1).family, ElemFamily::Lagrange);
    }

    #[test]
    fn small_cantilever_run_reports_consistently() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::new(Benchmark::Cantilever);
        cfg.nelx = 8;
        cfg.nely = 4;
        cfg.nelz = 4;
        cfg.vol_frac = Some(0.3);
        cfg.r_min = 1.2;
        cfg.out_dir = Some(dir.path().to_path_buf());
        let rep = run(&cfg).unwrap();

        assert_eq!(rep.census_raw.total(), rep.rho.len());
        assert_eq!(rep.density_dims, [8, 4, 4]);
        assert!(rep.volume <= rep.budget + 1e-8);
        assert!(rep.timing.named_sum() <= rep.timing.total + 1e-9);
        let logged: usize = rep.stages.iter().map(|s| s.records.len()).sum();
        let counted: usize = rep.stages.iter().map(|s| s.n_it + s.n_rs).sum();
        assert_eq!(logged, counted);

        // One CSV data row per LP subproblem across all stages.
        let csv = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
        let data_rows = csv
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("stage,"))
            .count();
        assert_eq!(data_rows, logged);

        let (dims, rho) = crate::io::read_density_bin(&dir.path().join("density.bin")).unwrap();
        assert_eq!(dims, rep.density_dims);
        assert_eq!(rho, rep.rho);
        let (vdims, vrho) = crate::io::read_density_vtk(&dir.path().join("density.vtk")).unwrap();
        assert_eq!(vdims, rep.density_dims);
        assert_eq!(vrho.len(), rep.rho.len());
        assert!(dir.path().join("summary.txt").exists());

        if rep.outcome == Outcome::Converged {
            assert!(rep.g_p_inf < 1e-3);
            let t = rep.rho_thresholded.as_ref().unwrap();
            let c = Census::of(t);
            assert_eq!(c.intermediate, 0, "projection leaves only 0/1 cells");
            assert!(dir.path().join("density_thresholded.vtk").exists());
        }

        // Re-solving the raw field the traditional way reproduces the raw
        // compliance when the density mesh is the displacement mesh.
        let f = corrected_compliance(
            &rep.rho,
            &cfg.mesh_spec_for(1),
            cfg.problem,
            &cfg.params,
            &cfg.correction_material(),
            cfg.precond,
            &cfg.mg,
            cfg.pcg_tol,
            cfg.pcg_max_iters,
        )
        .unwrap();
        assert!(
            (f - rep.f_raw).abs() <= 1e-6 * rep.f_raw.abs(),
            "corrected {f} vs raw {}",
            rep.f_raw
        );
    }

    #[test]
    fn multires_run_obeys_budget_on_the_density_mesh() {
        let mut cfg = RunConfig::new(Benchmark::Cantilever);
        cfg.nelx = 8;
        cfg.nely = 4;
        cfg.nelz = 4;
        cfg.mode = Mode::Multires;
        cfg.n_mr = 2;
        cfg.d_mr = 2;
        cfg.vol_frac = Some(0.3);
        cfg.r_min = 1.5;
        cfg.slp.max_outer = 120;
        let rep = run(&cfg).unwrap();
        assert_eq!(rep.density_dims, [16, 8, 8]);
        assert_eq!(rep.rho.len(), 16 * 8 * 8);
        // Density cells are (1/2)^3 in volume: the domain measure stays
        // the physical one.
        assert!((rep.domain_volume - 128.0).abs() < 1e-12);
        assert!(rep.volume <= rep.budget + 1e-8);
        if let Some(v) = rep.volume_thresholded {
            assert!(v <= rep.budget + cfg.threshold.eps_v * rep.domain_volume + 1e-9);
        }
    }
}
