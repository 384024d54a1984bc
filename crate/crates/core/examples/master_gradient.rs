//! Measure gradient of the master solution from the linearized system,
//! checked against a finite difference.

use finite_mfg::master::{gradient_matrix, master_u, solve_fb, FbOptions, Linearization};
use finite_mfg::ModelSpec;

fn main() -> finite_mfg::Result<()> {
    let model = ModelSpec::two_state_congestion();
    let opts = FbOptions::for_model(&model).with_tol(1e-12);
    let (t0, eta) = (0.3, [0.7, 0.3]);
    let fb = solve_fb(&model, t0, &eta, &opts)?;
    let full = gradient_matrix(&fb, Linearization::Full, &opts)?;
    let frozen = gradient_matrix(&fb, Linearization::FrozenControls, &opts)?;

    // Tangent direction e_1 - e_2.
    let h = 1e-4;
    for x in 0..model.d {
        let up = master_u(&model, t0, x, &[eta[0] + h, eta[1] - h], &opts)?;
        let down = master_u(&model, t0, x, &[eta[0] - h, eta[1] + h], &opts)?;
        let fd = (up - down) / (2.0 * h);
        println!(
            "x={x}: full {:+.8}  frozen {:+.8}  finite difference {:+.8}",
            full[x][0] - full[x][1],
            frozen[x][0] - frozen[x][1],
            fd
        );
    }
    Ok(())
}
