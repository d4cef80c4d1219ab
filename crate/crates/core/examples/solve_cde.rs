//! Integrates the scalar CDE `dh = -h dX` along an irregularly sampled path
//! with RK4 and with the implicit Adams-Moulton solver. The exact solution is
//! `h(t) = h0 exp(-(X(t) - X(0)))`, whatever the path.
//!
//! cargo run --example solve_cde

use stable_cde::cde::{integrate_values, ControlPath, FnField, SolverConfig};
use stable_cde::diffcore::{Array, Tape};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let times = vec![0.0, 0.7, 1.1, 2.9, 4.0, 6.5];
    let values = vec![0.0, 0.4, -0.2, 1.5, 1.0, 2.2];
    let path = ControlPath::new(times.clone(), Array::matrix(times.len(), 1, values.clone())?)?;
    let field = FnField::new(1, 1, |t: &mut Tape, h| Ok(t.scale(h, -1.0)));

    println!("{:>6} {:>12} {:>12} {:>12}", "t", "exact", "rk4", "adams");
    for dt in [0.5, 0.1] {
        let rk4 = integrate_values(&field, &[1.0], &path, &times, &SolverConfig::rk4(dt))?;
        let adams = integrate_values(&field, &[1.0], &path, &times, &SolverConfig::implicit_adams(dt))?;
        println!("dt = {dt}");
        for (k, (&t, &x)) in times.iter().zip(&values).enumerate() {
            println!(
                "{t:>6.2} {:>12.8} {:>12.8} {:>12.8}",
                (-x).exp(),
                rk4.states.get2(k, 0),
                adams.states.get2(k, 0)
            );
        }
    }
    Ok(())
}
