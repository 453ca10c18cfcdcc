//! The trust-region SLP driver on its own, away from any mesh. The toy
//! problem
//!
//! ```text
//!   min  sum c_i / (0.1 + x_i)   s.t.  sum x_i <= b,  0 <= x <= 1
//! ```
//!
//! is compliance-like (convex, decreasing, resource-constrained) and has
//! a closed-form KKT point to compare against: x_i = sqrt(c_i/lambda) - 0.1
//! clamped to the box, with lambda chosen to spend the budget exactly.
//!
//! ```bash
//! cargo run --example optimizer
//! ```

use topopt::slp::{slp_drive, SlpCallbacks, SlpConfig, SlpInputs};

struct Toy {
    c: Vec<f64>,
    x: Vec<f64>,
}

impl SlpCallbacks for Toy {
    fn evaluate(&mut self, x: &[f64]) -> topopt::Result<f64> {
        self.x = x.to_vec();
        Ok(self.c.iter().zip(x).map(|(c, x)| c / (0.1 + x)).sum())
    }

    fn gradient(&mut self) -> topopt::Result<Vec<f64>> {
        Ok(self
            .c
            .iter()
            .zip(&self.x)
            .map(|(c, x)| -c / ((0.1 + x) * (0.1 + x)))
            .collect())
    }
}

fn main() -> topopt::Result<()> {
    let n = 12;
    let c: Vec<f64> = (0..n).map(|i| 0.25 + 0.35 * i as f64).collect();
    let b = n as f64 / 3.0;

    // Reference point by bisection on the multiplier.
    let spend = |lam: f64| -> f64 {
        c.iter().map(|ci| ((ci / lam).sqrt() - 0.1).clamp(0.0, 1.0)).sum()
    };
    let (mut lo, mut hi) = (1e-8, 1e8);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if spend(mid) > b {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lam_ref = 0.5 * (lo + hi);
    let x_ref: Vec<f64> =
        c.iter().map(|ci| ((ci / lam_ref).sqrt() - 0.1).clamp(0.0, 1.0)).collect();
    let f_ref: f64 = c.iter().zip(&x_ref).map(|(c, x)| c / (0.1 + x)).sum();

    let mut cfg = SlpConfig::default();
    cfg.eps_g = 1e-6;
    cfg.eps_f = 1e-10;
    cfg.eps_s = 1e-8;
    cfg.delta_min = 1e-10;

    let lower = vec![0.0; n];
    let upper = vec![1.0; n];
    let a = vec![1.0; n];
    let mut toy = Toy { c: c.clone(), x: vec![] };
    let rep = slp_drive(
        &mut toy,
        SlpInputs {
            x0: vec![b / n as f64; n],
            lower: &lower,
            upper: &upper,
            fixed: vec![false; n],
            a: &a,
            b,
        },
        &cfg,
    )?;

    let dx = rep
        .x
        .iter()
        .zip(&x_ref)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("accepted steps {}   rejected {}   stop {:?}", rep.accepted, rep.rejected, rep.stop);
    println!("objective  slp {:.12}   kkt {:.12}", rep.f, f_ref);
    println!("multiplier slp {:.9}   kkt {:.9}", rep.lambda, lam_ref);
    println!("max |x - x_kkt| = {dx:.3e}");
    println!("budget use: {:.12} of {b}", rep.x.iter().sum::<f64>());
    Ok(())
}
