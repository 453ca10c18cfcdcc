//! Projection of a converged density field onto a 0/1 design.
//!
//! Two strategies produce the projected vector: ranking the densities and
//! keeping the largest ones, or walking along the negative Lagrangian
//! gradient until enough components hit their bounds. A tanh Heaviside
//! sharpening runs immediately before and after either strategy, with its
//! midpoint chosen to preserve the current volume. The outer quality loop
//! re-runs the optimizer from the projected field until two consecutive
//! projections agree.

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ThresholdConfig {
    /// Densities at or above this round to 1 before any strategy runs.
    pub round_hi: f64,
    /// Densities at or below this round to 0 before any strategy runs.
    pub round_lo: f64,
    /// Largest angle, in degrees, allowed between the projection step and
    /// the negative Lagrangian gradient.
    pub theta_max_deg: f64,
    /// A component may only be pushed to 1 if its input density reaches this.
    pub safeguard_up: f64,
    /// A component may only be pushed to 0 if its input density is below this.
    pub safeguard_down: f64,
    /// Relative l1 tolerance between consecutive projected fields.
    pub eps_n: f64,
    /// Volume-fraction slack allowed on the projected field.
    pub eps_v: f64,
    pub max_attempts: usize,
    pub beta0: f64,
    pub beta_growth: f64,
    pub beta_max: f64,
}

impl Default for ThresholdConfig {
    fn default() -> ThresholdConfig {
        ThresholdConfig {
            round_hi: 0.95,
            round_lo: 0.05,
            theta_max_deg: 89.9,
            safeguard_up: 0.3,
            safeguard_down: 0.7,
            eps_n: 0.01,
            eps_v: 0.005,
            max_attempts: 10,
            beta0: 1.0,
            beta_growth: 2.0,
            beta_max: 100.0,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.round_lo && self.round_lo < self.round_hi && self.round_hi < 1.0) {
            return Err(Error::Config("rounding cutoffs must satisfy 0 < lo < hi < 1".into()));
        }
        if !(0.0 < self.safeguard_up && self.safeguard_up < self.safeguard_down
            && self.safeguard_down < 1.0)
        {
            return Err(Error::Config("safeguards must satisfy 0 < up < down < 1".into()));
        }
        if !(self.theta_max_deg > 0.0 && self.theta_max_deg < 90.0) {
            return Err(Error::Config("the angle bound must lie in (0, 90) degrees".into()));
        }
        if self.max_attempts == 0 || self.beta0 <= 0.0 || self.beta_growth < 1.0 {
            return Err(Error::Config("bad projection-loop parameters".into()));
        }
        Ok(())
    }

    pub fn cos_theta_max(&self) -> f64 {
        self.theta_max_deg.to_radians().cos()
    }
}

/// Round near-binary densities in place: the cheap part of every strategy.
pub fn pre_round(rho: &mut [f64], cfg: &ThresholdConfig) {
    for r in rho {
        if *r >= cfg.round_hi {
            *r = 1.0;
        } else if *r <= cfg.round_lo {
            *r = 0.0;
        }
    }
}

/// Keep the `floor(vol_frac * n)` largest densities as 1, zero the rest.
/// Ties go to the lowest index.
pub fn rank_threshold(rho: &[f64], vol_frac: f64) -> Vec<f64> {
    let n = rho.len();
    // The small bias keeps exact products like 0.3 * 10 from flooring down.
    let count = ((vol_frac * n as f64 + 1e-9).floor() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort: equal densities stay in index order, so the lowest
    // indices win the last slots.
    order.sort_by(|&i, &j| rho[j].partial_cmp(&rho[i]).unwrap());
    let mut out = vec![0.0; n];
    for &i in order.iter().take(count) {
        out[i] = 1.0;
    }
    out
}

/// True when `d` points within the configured angle of the steepest-descent
/// direction of the Lagrangian. Degenerate inputs cannot certify ascent, so
/// they pass.
pub fn angle_condition(grad_l: &[f64], d: &[f64], cos_max: f64) -> bool {
    let gn = norm2(grad_l);
    let dn = norm2(d);
    if gn == 0.0 || dn == 0.0 {
        log::debug!("degenerate angle check (|g| = {gn:.3e}, |d| = {dn:.3e}); accepting");
        return true;
    }
    -dot(grad_l, d) / (gn * dn) > cos_max
}

/// Project `rho - alpha * grad_l` onto [0, 1] for the largest breakpoint
/// `alpha` that rounds no component across its safeguard and keeps the step
/// a descent direction. Returns the projected field and the step length, or
/// `None` when no breakpoint qualifies.
pub fn gradient_threshold(
    rho: &[f64],
    grad_l: &[f64],
    cfg: &ThresholdConfig,
) -> Option<(Vec<f64>, f64)> {
    let n = rho.len();
    let cos_max = cfg.cos_theta_max();
    // Breakpoint: the step length at which component i reaches the bound its
    // gradient sign drives it toward.
    let mut bps: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let g = grad_l[i];
        if g > 0.0 {
            bps.push((rho[i] / g, i));
        } else if g < 0.0 {
            bps.push(((rho[i] - 1.0) / g, i));
        }
    }
    if bps.is_empty() {
        return None;
    }
    bps.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

    // Once a component would cross its safeguard, every larger step also
    // rounds it, so admissible candidates stop at the first offender.
    let mut cap = f64::INFINITY;
    for &(alpha, i) in &bps {
        let ok = if grad_l[i] < 0.0 {
            rho[i] >= cfg.safeguard_up
        } else {
            rho[i] <= cfg.safeguard_down
        };
        if !ok {
            cap = alpha;
            break;
        }
    }

    for &(alpha, _) in bps.iter().rev() {
        if alpha >= cap || alpha <= 0.0 {
            continue;
        }
        let cand: Vec<f64> = (0..n)
            .map(|i| (rho[i] - alpha * grad_l[i]).clamp(0.0, 1.0))
            .collect();
        let d: Vec<f64> = (0..n).map(|i| cand[i] - rho[i]).collect();
        if angle_condition(grad_l, &d, cos_max) {
            return Some((cand, alpha));
        }
    }
    None
}

/// Smooth tanh step: 0 and 1 are fixed points, densities above `eta` move up
/// and those below move down, more sharply as `beta` grows.
pub fn heaviside(rho_i: f64, beta: f64, eta: f64) -> f64 {
    let denom = (beta * eta).tanh() + (beta * (1.0 - eta)).tanh();
    ((beta * eta).tanh() + (beta * (rho_i - eta)).tanh()) / denom
}

pub fn heaviside_apply(rho: &mut [f64], beta: f64, eta: f64) {
    for r in rho {
        *r = heaviside(*r, beta, eta);
    }
}

/// Midpoint that makes the sharpened field keep the current volume:
/// the zero of f(eta) = sum v_i h(rho_i, beta, eta) - sum v_i rho_i.
/// f(0) >= 0 >= f(1), so a bracketed Newton iteration always lands inside
/// (0, 1). Returns `None` for all-void or all-solid fields, where every
/// midpoint works and sharpening is a no-op.
pub fn solve_eta(rho: &[f64], v: &[f64], beta: f64) -> Option<f64> {
    assert_eq!(rho.len(), v.len());
    if rho.iter().all(|&r| r <= 0.0) || rho.iter().all(|&r| r >= 1.0) {
        return None;
    }
    let total: f64 = v.iter().sum();
    let target: f64 = dot(rho, v);
    let tol = 1e-10 * total;

    let eval = |eta: f64| -> (f64, f64) {
        let te = (beta * eta).tanh();
        let t1 = (beta * (1.0 - eta)).tanh();
        let denom = te + t1;
        let dte = beta * (1.0 - te * te);
        let dt1 = -beta * (1.0 - t1 * t1);
        let mut f = -target;
        let mut fp = 0.0;
        for i in 0..rho.len() {
            let tr = (beta * (rho[i] - eta)).tanh();
            let num = te + tr;
            let dnum = dte - beta * (1.0 - tr * tr);
            f += v[i] * num / denom;
            fp += v[i] * (dnum * denom - num * (dte + dt1)) / (denom * denom);
        }
        (f, fp)
    };

    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut eta = 0.5;
    for _ in 0..300 {
        let (f, fp) = eval(eta);
        if f.abs() < tol {
            return Some(eta);
        }
        if f > 0.0 {
            lo = eta;
        } else {
            hi = eta;
        }
        let newton = eta - f / fp;
        eta = if fp != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    // The bracket is shorter than an ulp by now; the residual cannot shrink
    // further in floating point.
    Some(eta)
}

/// What the quality loop needs from the surrounding optimizer.
pub trait ThresholdEnv {
    /// Current converged density field.
    fn density(&self) -> &[f64];
    /// Lagrangian gradient per density cell at the current solution.
    fn lagrangian_gradient(&self) -> &[f64];
    /// Density cell volumes.
    fn volumes(&self) -> &[f64];
    fn vol_frac(&self) -> f64;
    /// Re-run the optimizer starting from the given density field, updating
    /// what `density` and `lagrangian_gradient` return.
    fn resolve_from(&mut self, rho: &[f64]) -> Result<()>;
    /// Compliance of a fixed density field from a fresh equilibrium solve.
    fn compliance_of(&mut self, rho: &[f64]) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Rank,
    Gradient,
    /// Neither strategy produced an admissible step; only the Heaviside
    /// sharpening was applied this attempt.
    Skipped,
}

#[derive(Debug, Clone)]
pub struct AttemptRecord {
    pub attempt: usize,
    pub beta: f64,
    pub strategy: Strategy,
    /// Step length of the gradient strategy, when it ran.
    pub alpha: Option<f64>,
    pub volume: f64,
    pub vol_ok: bool,
    /// l1 change relative to the previous projected field.
    pub rel_change: f64,
}

#[derive(Debug, Clone)]
pub struct ThresholdReport {
    pub rho: Vec<f64>,
    pub attempts: usize,
    pub converged: bool,
    /// Set when the attempt cap was hit and `rho` is the best attempt rather
    /// than a converged one.
    pub fallback: bool,
    pub records: Vec<AttemptRecord>,
}

/// Repeat { sharpen, project, sharpen, re-optimize } until two consecutive
/// projected fields agree within `eps_n` and the volume fits. On attempt
/// exhaustion the volume-feasible attempt with the lowest recomputed
/// compliance wins (the least-volume attempt if none fit).
pub fn quality_loop<E: ThresholdEnv>(env: &mut E, cfg: &ThresholdConfig) -> Result<ThresholdReport> {
    cfg.validate()?;
    let v = env.volumes().to_vec();
    let total_v: f64 = v.iter().sum();
    let vol_cap = (env.vol_frac() + cfg.eps_v) * total_v;
    let cos_max = cfg.cos_theta_max();

    let mut beta = cfg.beta0;
    let mut prev = env.density().to_vec();
    let mut records = Vec::new();
    let mut attempts: Vec<(Vec<f64>, f64, bool)> = Vec::new();

    for attempt in 1..=cfg.max_attempts {
        let grad_l = env.lagrangian_gradient().to_vec();
        let mut work = env.density().to_vec();
        if let Some(eta) = solve_eta(&work, &v, beta) {
            heaviside_apply(&mut work, beta, eta);
        }
        pre_round(&mut work, cfg);

        let ranked = rank_threshold(&work, env.vol_frac());
        let d: Vec<f64> = (0..work.len()).map(|i| ranked[i] - work[i]).collect();
        let (mut tilde, strategy, alpha) = if angle_condition(&grad_l, &d, cos_max) {
            (ranked, Strategy::Rank, None)
        } else if let Some((t, a)) = gradient_threshold(&work, &grad_l, cfg) {
            (t, Strategy::Gradient, Some(a))
        } else {
            log::warn!("projection attempt {attempt}: no admissible step; field kept");
            (work, Strategy::Skipped, None)
        };
        if let Some(eta) = solve_eta(&tilde, &v, beta) {
            heaviside_apply(&mut tilde, beta, eta);
        }

        let volume = dot(&tilde, &v);
        let vol_ok = volume <= vol_cap;
        let prev_norm: f64 = prev.iter().map(|x| x.abs()).sum();
        let diff: f64 = tilde.iter().zip(&prev).map(|(a, b)| (a - b).abs()).sum();
        let small = diff < cfg.eps_n * prev_norm;
        records.push(AttemptRecord {
            attempt,
            beta,
            strategy,
            alpha,
            volume,
            vol_ok,
            rel_change: if prev_norm > 0.0 { diff / prev_norm } else { f64::INFINITY },
        });

        if small && vol_ok {
            return Ok(ThresholdReport {
                rho: tilde,
                attempts: attempt,
                converged: true,
                fallback: false,
                records,
            });
        }
        attempts.push((tilde.clone(), volume, vol_ok));
        beta = (cfg.beta_growth * beta).min(cfg.beta_max);
        prev = tilde.clone();
        if attempt < cfg.max_attempts {
            env.resolve_from(&tilde)?;
        }
    }

    // Exhausted. Rank the stored attempts: feasible ones by a fresh
    // compliance evaluation, otherwise least volume.
    let feasible: Vec<usize> =
        (0..attempts.len()).filter(|&i| attempts[i].2).collect();
    let pick = if feasible.is_empty() {
        log::warn!("no projection attempt met the volume bound; keeping the smallest");
        (0..attempts.len())
            .min_by(|&i, &j| attempts[i].1.partial_cmp(&attempts[j].1).unwrap())
            .unwrap()
    } else {
        let mut best = feasible[0];
        let mut best_f = env.compliance_of(&attempts[best].0)?;
        for &i in &feasible[1..] {
            let f = env.compliance_of(&attempts[i].0)?;
            if f < best_f {
                best = i;
                best_f = f;
            }
        }
        best
    };
    log::warn!(
        "projection attempts exhausted; keeping attempt {} of {}",
        pick + 1,
        cfg.max_attempts
    );
    Ok(ThresholdReport {
        rho: attempts[pick].0.clone(),
        attempts: cfg.max_attempts,
        converged: false,
        fallback: true,
        records,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
