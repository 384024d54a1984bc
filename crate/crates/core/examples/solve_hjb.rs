//! Solve the n-player symmetric Nash system and compare it with the master
//! equation at a few grid measures.

use finite_mfg::hjb_n::solve_hjb_n;
use finite_mfg::master::{master_values, FbOptions};
use finite_mfg::ModelSpec;

fn main() -> finite_mfg::Result<()> {
    let model = ModelSpec::two_state_congestion();
    let n = 16;
    let v = solve_hjb_n(&model, n, 1e-3)?;
    println!("n={n}: {} grid measures, {} RK4 steps", v.grid().len(), v.steps());

    let opts = FbOptions::for_model(&model);
    for r in (0..v.grid().len()).step_by(3) {
        let eta = v.grid().point(r);
        let u = master_values(&model, 0.0, eta, &opts)?;
        println!(
            "eta {:.3?}  V^n(0,0,eta) {:.6}  U(0,0,eta) {:.6}  gap {:.2e}",
            eta,
            v.value(0, 0, r),
            u[0],
            (v.value(0, 0, r) - u[0]).abs()
        );
    }
    let out = std::env::temp_dir().join("value_grid.csv");
    v.write_csv(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
