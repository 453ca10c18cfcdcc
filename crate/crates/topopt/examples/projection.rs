//! Volume-preserving Heaviside projection, the sharpening half of the
//! thresholding stage. For each steepness beta the threshold eta is
//! solved so the projected field keeps the material volume of the input
//! exactly; growing beta then walks the field toward 0/1 without ever
//! losing mass.
//!
//! ```bash
//! cargo run --example projection
//! ```

use topopt::threshold::{heaviside, solve_eta};

fn main() {
    // A smooth density hump, the kind of field an optimizer hands over.
    let n = 2000;
    let rho: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            0.5 + 0.45 * (std::f64::consts::TAU * t).sin() * (2.2 * t).cos()
        })
        .collect();
    let v = vec![1.0; n];
    let mass: f64 = rho.iter().sum();

    println!("input: {} cells, material volume {:.6}", n, mass);
    println!("\n{:>8} {:>12} {:>16} {:>12}", "beta", "eta", "volume error", "undecided");
    for beta in [1.0, 4.0, 16.0, 64.0, 256.0] {
        let eta = solve_eta(&rho, &v, beta).expect("volume target within reach");
        let h: Vec<f64> = rho.iter().map(|&r| heaviside(r, beta, eta)).collect();
        let err = (h.iter().sum::<f64>() - mass).abs();
        // Cells the projection has not yet pushed against a bound.
        let undecided = h.iter().filter(|&&x| x > 0.01 && x < 0.99).count();
        println!("{beta:>8} {eta:>12.6} {err:>16.3e} {undecided:>12}");
    }
    println!(
        "\nThe volume error stays at solver precision for every beta while \
         the undecided band shrinks; the full quality loop grows beta this \
         way between re-solves until the rounded field passes its checks."
    );
}
