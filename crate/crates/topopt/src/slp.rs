//! Trust-region sequential linear programming for one linear resource
//! constraint plus box bounds.
//!
//! Each outer iteration linearizes the objective, solves the LP subproblem
//! exactly, and accepts or rejects the step with a merit function that
//! blends objective decrease and constraint violation. The LP has
//! continuous-knapsack structure, so instead of a general simplex solver
//! the subproblem is solved by a Lagrangian breakpoint search: walk the
//! candidate multipliers in increasing order until the constraint can be
//! met exactly, splitting at most one variable.

use crate::{Error, Result};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn half_sq_pos(c: f64) -> f64 {
    let v = c.max(0.0);
    0.5 * v * v
}

#[derive(Clone, Copy, Debug)]
pub struct SlpConfig {
    pub delta0: f64,
    pub delta_min: f64,
    /// Accept a step when A_red >= accept_ratio * P_red.
    pub accept_ratio: f64,
    /// Grow the trust region when A_red >= strong_ratio * P_red.
    pub strong_ratio: f64,
    pub shrink_step: f64,
    pub shrink_delta: f64,
    pub growth: f64,
    /// Numerator constant of the large-theta safeguard.
    pub theta_n: f64,
    pub eps_s: f64,
    pub eps_f: f64,
    pub eps_g: f64,
    /// Consecutive accepted iterations a criterion must hold.
    pub consecutive: usize,
    pub max_outer: usize,
}

impl Default for SlpConfig {
    fn default() -> SlpConfig {
        SlpConfig {
            delta0: 0.1,
            delta_min: 1e-4,
            accept_ratio: 0.1,
            strong_ratio: 0.5,
            shrink_step: 0.25,
            shrink_delta: 0.1,
            growth: 2.0,
            theta_n: 1e6,
            eps_s: 1e-4,
            eps_f: 5e-2,
            eps_g: 1e-3,
            consecutive: 3,
            max_outer: 500,
        }
    }
}

pub struct LpStep {
    pub s: Vec<f64>,
    /// Multiplier of the resource constraint; zero when inactive.
    pub lambda: f64,
}

/// Exact solution of  min g's  s.t.  a's + c0 <= 0,  sl <= s <= su.
///
/// Walks the breakpoints lambda_i = -g_i/a_i of the Lagrangian
/// s(lambda) = argmin (g + lambda a)'s in ascending order; a's(lambda) is
/// non-increasing, so the first multiplier at which the constraint can be
/// satisfied is the optimal one, with at most one variable set strictly
/// between its bounds to meet the constraint exactly. Returns `None` when
/// even the most constraint-reducing corner of the box is infeasible.
pub fn solve_box_lp(
    g: &[f64],
    a: &[f64],
    c0: f64,
    sl: &[f64],
    su: &[f64],
) -> Option<LpStep> {
    let n = g.len();
    // argmin at lambda -> 0+: ties on g broken toward smaller a_i s_i.
    let mut s: Vec<f64> = (0..n)
        .map(|i| {
            if g[i] > 0.0 {
                sl[i]
            } else if g[i] < 0.0 {
                su[i]
            } else if a[i] > 0.0 {
                sl[i]
            } else if a[i] < 0.0 {
                su[i]
            } else {
                0.0f64.clamp(sl[i], su[i])
            }
        })
        .collect();
    let mut h = c0 + dot(a, &s);
    if h <= 0.0 {
        return Some(LpStep { s, lambda: 0.0 });
    }

    let mut bps: Vec<(f64, usize)> = (0..n)
        .filter(|&i| a[i] != 0.0)
        .filter_map(|i| {
            let lam = -g[i] / a[i];
            (lam > 0.0).then_some((lam, i))
        })
        .collect();
    bps.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));

    for (lam, i) in bps {
        // Crossing the breakpoint flips s_i to the bound that reduces a's.
        let post = if a[i] > 0.0 { sl[i] } else { su[i] };
        let dh = a[i] * (post - s[i]);
        if h + dh > 0.0 {
            s[i] = post;
            h += dh;
        } else {
            // Split this variable so the constraint holds with equality.
            s[i] -= h / a[i];
            return Some(LpStep { s, lambda: lam });
        }
        if h == 0.0 {
            return Some(LpStep { s, lambda: lam });
        }
    }
    None
}

/// Fallback when the LP subproblem is infeasible: minimize the artificial
/// slack of the constraint over the (already reduced) box. Returns the
/// most feasible step, scaled back so the constraint holds with equality
/// whenever it can be met at all.
pub fn feasibility_restoration(a: &[f64], c0: f64, sl: &[f64], su: &[f64]) -> Vec<f64> {
    let n = a.len();
    if c0 <= 0.0 {
        return vec![0.0; n];
    }
    let sbar: Vec<f64> = (0..n)
        .map(|i| {
            if a[i] > 0.0 {
                sl[i]
            } else if a[i] < 0.0 {
                su[i]
            } else {
                0.0f64.clamp(sl[i], su[i])
            }
        })
        .collect();
    let drop = dot(a, &sbar);
    if c0 + drop > 0.0 {
        return sbar;
    }
    let t = -c0 / drop;
    sbar.iter().map(|v| t * v).collect()
}

/// The merit-weight safeguard: small enough that the predicted reduction
/// stays nonnegative, 1 whenever the step loses no feasibility.
pub fn theta_sup(p_fsb: f64, p_opt: f64) -> f64 {
    if p_fsb <= 0.0 {
        // Feasible iterates of a linear constraint always land here; the
        // merit function stays the pure objective.
        1.0
    } else if p_opt <= 0.5 * p_fsb {
        0.5 * p_fsb / (p_fsb - p_opt)
    } else {
        1.0
    }
}

/// Trust-region radius update. Rejections shrink hard; strong acceptances
/// double up to the bound span; the radius never ends an accepted step
/// below `delta_min`.
pub fn trust_region_update(
    cfg: &SlpConfig,
    accepted: bool,
    strong: bool,
    step_inf: f64,
    delta: f64,
    span: f64,
) -> f64 {
    if !accepted {
        return (cfg.shrink_step * step_inf).min(cfg.shrink_delta * delta);
    }
    let grown = if strong {
        (cfg.growth * delta).min(span)
    } else {
        delta
    };
    grown.max(cfg.delta_min)
}

/// Infinity norm of the projected Lagrangian gradient
/// P_X(x - (grad f + lambda a)) - x over the non-fixed variables; zero
/// exactly at first-order stationary points of the box-constrained
/// Lagrangian.
pub fn projected_gradient_inf(
    x: &[f64],
    grad: &[f64],
    lambda: f64,
    a: &[f64],
    lower: &[f64],
    upper: &[f64],
    fixed: &[bool],
) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        if fixed[i] {
            continue;
        }
        let gl = grad[i] + lambda * a[i];
        let step = (x[i] - gl).clamp(lower[i], upper[i]) - x[i];
        worst = worst.max(step.abs());
    }
    worst
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Objective change and projected gradient both small.
    SmallChangeAndStationary,
    /// Step lengths collapsed.
    SmallSteps,
    /// Outer-iteration budget exhausted without meeting a criterion.
    IterationLimit,
}

#[derive(Clone, Debug)]
pub struct IterRecord {
    /// 1-based count of LP subproblems solved so far.
    pub outer: usize,
    /// Accepted iterations completed after this row.
    pub k: usize,
    pub accepted: bool,
    /// Objective at the trial point.
    pub f: f64,
    /// Constraint value a'x - b at the trial point.
    pub constraint: f64,
    pub step_inf: f64,
    /// Trust radius the LP was solved with.
    pub delta: f64,
    pub theta: f64,
    pub lambda: f64,
    /// Projected-gradient norm; recomputed only at accepted iterates.
    pub g_p_inf: Option<f64>,
}

pub struct SlpReport {
    pub x: Vec<f64>,
    pub f: f64,
    pub lambda: f64,
    pub stop: StopReason,
    pub accepted: usize,
    pub rejected: usize,
    pub records: Vec<IterRecord>,
}

/// What the driver should pick up after an accepted step.
#[derive(Default)]
pub struct AcceptAction {
    /// Replacement fixed-variable mask, if the acceptance changed it.
    pub fixed: Option<Vec<bool>>,
    /// The underlying model changed (e.g. DOFs suppressed); objective and
    /// gradient must be re-evaluated at the current iterate.
    pub reevaluate: bool,
}

pub trait SlpCallbacks {
    /// Full objective evaluation at `x` (for the FE problem: filter,
    /// assemble, solve). Called once per trial point.
    fn evaluate(&mut self, x: &[f64]) -> Result<f64>;
    /// Objective gradient at the point passed to the last `evaluate`.
    fn gradient(&mut self) -> Result<Vec<f64>>;
    /// Invoked after the `k`-th accepted step.
    fn on_accept(&mut self, _k: usize) -> Result<AcceptAction> {
        Ok(AcceptAction::default())
    }
    /// Per-subproblem log hook.
    fn log(&mut self, _rec: &IterRecord) {}
}

pub struct SlpInputs<'a> {
    pub x0: Vec<f64>,
    pub lower: &'a [f64],
    pub upper: &'a [f64],
    /// Variables held at their current value (zero-width LP bounds).
    pub fixed: Vec<bool>,
    /// Constraint gradient: feasible means a'x <= b.
    pub a: &'a [f64],
    pub b: f64,
}

pub fn slp_drive(
    cb: &mut dyn SlpCallbacks,
    inputs: SlpInputs,
    cfg: &SlpConfig,
) -> Result<SlpReport> {
    let SlpInputs { x0: mut x, lower, upper, mut fixed, a, b } = inputs;
    let n = x.len();
    if lower.len() != n || upper.len() != n || fixed.len() != n || a.len() != n {
        return Err(Error::Config("SLP input dimensions disagree".into()));
    }
    for i in 0..n {
        if !(lower[i] <= x[i] && x[i] <= upper[i]) {
            return Err(Error::Config(format!(
                "initial point leaves the box at variable {i}"
            )));
        }
    }
    let scale = b.abs().max(1.0);
    if dot(a, &x) - b > 1e-9 * scale {
        return Err(Error::Config("initial point violates the constraint".into()));
    }
    let span = (0..n)
        .map(|i| upper[i] - lower[i])
        .fold(0.0f64, f64::max);

    let mut f = cb.evaluate(&x)?;
    let mut grad = cb.gradient()?;
    let mut delta = cfg.delta0;
    let mut lambda = 0.0f64;
    let mut theta_max = 1.0f64;
    let mut theta_min_hist = 1.0f64;
    let mut k = 0usize;
    let mut rejected = 0usize;
    let mut hit_fg = 0usize;
    let mut hit_s = 0usize;
    let mut collapsed = 0usize;
    let mut records = Vec::new();
    let mut stop = StopReason::IterationLimit;

    let mut sl = vec![0.0; n];
    let mut su = vec![0.0; n];
    for outer in 1..=cfg.max_outer {
        // Summation dust on a^T x must not read as infeasibility: a positive
        // c0 of roundoff size would send theta_sup a squared-dust feasibility
        // gain and collapse the merit weight for the rest of the run.
        let mut c0 = dot(a, &x) - b;
        if c0.abs() <= 1e-9 * scale {
            c0 = 0.0;
        }
        for i in 0..n {
            if fixed[i] {
                sl[i] = 0.0;
                su[i] = 0.0;
            } else {
                sl[i] = (-delta).max(lower[i] - x[i]);
                su[i] = delta.min(upper[i] - x[i]);
            }
        }

        let (mut s, lambda_new) = match solve_box_lp(&grad, a, c0, &sl, &su) {
            Some(step) => (step.s, Some(step.lambda)),
            None => {
                // Restoration works on a slightly reduced trust region.
                let rl: Vec<f64> = (0..n)
                    .map(|i| if fixed[i] { 0.0 } else { (-0.8 * delta).max(lower[i] - x[i]) })
                    .collect();
                let ru: Vec<f64> = (0..n)
                    .map(|i| if fixed[i] { 0.0 } else { (0.8 * delta).min(upper[i] - x[i]) })
                    .collect();
                (feasibility_restoration(a, c0, &rl, &ru), None)
            }
        };

        // At a feasible iterate the zero step is admissible, so the LP optimum
        // is never positive; an optimum of zero (up to cancellation noise in
        // the dot product) certifies first-order stationarity within the trust
        // region. Take s = 0 (equally optimal) so the small-step criterion
        // sees it, instead of re-rejecting a direction the LP is indifferent
        // about.
        if lambda_new.is_some() && c0 <= 0.0 {
            let magnitude: f64 = grad.iter().zip(&s).map(|(g, v)| (g * v).abs()).sum();
            if dot(&grad, &s) >= -1e-12 * magnitude {
                for v in &mut s {
                    *v = 0.0;
                }
            }
        }

        let p_opt = dot(&grad, &s);
        let m0 = half_sq_pos(c0);
        let ms = half_sq_pos(c0 + dot(a, &s));
        let p_fsb = m0 - ms;
        let theta_large =
            (1.0 + cfg.theta_n / ((k + 1) as f64).powf(1.1)) * theta_min_hist;
        let theta = theta_large.min(theta_sup(p_fsb, p_opt)).min(theta_max);
        theta_min_hist = theta_min_hist.min(theta);
        let p_red = -theta * p_opt + (1.0 - theta) * p_fsb;

        let x_trial: Vec<f64> = (0..n)
            .map(|i| (x[i] + s[i]).clamp(lower[i], upper[i]))
            .collect();
        let f_trial = cb.evaluate(&x_trial)?;
        let c_trial = dot(a, &x_trial) - b;
        let a_red = theta * (f - f_trial) + (1.0 - theta) * (m0 - half_sq_pos(c_trial));
        let step_inf = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));

        if a_red < cfg.accept_ratio * p_red {
            rejected += 1;
            let delta_used = delta;
            delta = trust_region_update(cfg, false, false, step_inf, delta, span);
            theta_max = theta;
            let rec = IterRecord {
                outer,
                k,
                accepted: false,
                f: f_trial,
                constraint: c_trial,
                step_inf,
                delta: delta_used,
                theta,
                lambda,
                g_p_inf: None,
            };
            cb.log(&rec);
            records.push(rec);
            // Rejections shrink past delta_min on purpose (a transient
            // may recover), but a radius that stays collapsed predicts
            // reductions below evaluation noise: no step will ever be
            // accepted again. Stop at the last accepted iterate.
            if delta < cfg.delta_min {
                collapsed += 1;
                if collapsed >= cfg.consecutive {
                    stop = StopReason::SmallSteps;
                    break;
                }
            } else {
                collapsed = 0;
            }
            continue;
        }

        let f_prev = f;
        collapsed = 0;
        x = x_trial;
        f = f_trial;
        if let Some(l) = lambda_new {
            lambda = l;
        }
        grad = cb.gradient()?;
        let delta_used = delta;
        delta = trust_region_update(
            cfg,
            true,
            a_red >= cfg.strong_ratio * p_red,
            step_inf,
            delta,
            span,
        );
        theta_max = 1.0;
        k += 1;

        let action = cb.on_accept(k)?;
        if let Some(mask) = action.fixed {
            if mask.len() != n {
                return Err(Error::Config("fixed-mask length changed".into()));
            }
            fixed = mask;
        }
        if action.reevaluate {
            f = cb.evaluate(&x)?;
            grad = cb.gradient()?;
        }

        let g_p = projected_gradient_inf(&x, &grad, lambda, a, lower, upper, &fixed);
        if (f_trial - f_prev).abs() < cfg.eps_f && g_p < cfg.eps_g {
            hit_fg += 1;
        } else {
            hit_fg = 0;
        }
        if step_inf < cfg.eps_s {
            hit_s += 1;
        } else {
            hit_s = 0;
        }

        let rec = IterRecord {
            outer,
            k,
            accepted: true,
            f: f_trial,
            constraint: c_trial,
            step_inf,
            delta: delta_used,
            theta,
            lambda,
            g_p_inf: Some(g_p),
        };
        cb.log(&rec);
        records.push(rec);

        if hit_fg >= cfg.consecutive {
            stop = StopReason::SmallChangeAndStationary;
            break;
        }
        if hit_s >= cfg.consecutive {
            stop = StopReason::SmallSteps;
            break;
        }
    }

    Ok(SlpReport { x, f, lambda, stop, accepted: k, rejected, records })
}
