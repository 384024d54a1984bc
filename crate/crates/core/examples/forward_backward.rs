//! Solve the mean-field forward-backward system from one initial measure and
//! print the equilibrium flow and values.

use finite_mfg::master::{solve_fb, FbOptions};
use finite_mfg::ModelSpec;

fn main() -> finite_mfg::Result<()> {
    let model = ModelSpec::from_json_file("examples/models/three_state.json")?;
    let opts = FbOptions::for_model(&model);
    let mu0 = [0.6, 0.3, 0.1];
    let fb = solve_fb(&model, 0.0, &mu0, &opts)?;
    println!("{} Picard iterations, final gap {:.2e}", fb.iterations, fb.residual);
    println!("U(0, ., mu0) = {:.6?}", fb.initial_values());
    for k in (0..=fb.steps()).step_by(fb.steps() / 10) {
        println!("t={:.2}  mu {:.4?}  u {:.4?}", fb.time(k), fb.mu_at(k), fb.u_at(k));
    }
    Ok(())
}
