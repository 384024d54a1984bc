//! Simulate the n-player game under its exact equilibrium policy and compare
//! the empirical measure with the mean-field flow.

use std::sync::Arc;

use finite_mfg::hjb_n::solve_hjb_n;
use finite_mfg::master::{mfg_flow, FbOptions};
use finite_mfg::simulator::{simulate, Initial, PolicySpec, RecordLevel, Seed, System};
use finite_mfg::ModelSpec;

fn main() -> finite_mfg::Result<()> {
    let model = ModelSpec::two_state_congestion();
    let mu0 = [0.75, 0.25];
    let (times, flow) = mfg_flow(&model, &mu0, &FbOptions::for_model(&model))?;
    for n in [16, 64, 256] {
        let policy = PolicySpec::ExactNash(Arc::new(solve_hjb_n(&model, n, 1e-3)?));
        let rec = simulate(&model, n, &policy, &Initial::iid(&mu0), Seed::new(42, 0), RecordLevel::Events)?;
        println!(
            "n={n:>3}: {} jumps ({} of {} candidates accepted), final measure {:.3?}, sup distance to flow {:.3}",
            rec.jump_count(System::X),
            rec.accepted,
            rec.candidates,
            rec.mu_path.final_measure(),
            rec.mu_path.sup_distance(&times, &flow)
        );
        if n == 16 {
            let out = std::env::temp_dir().join("events_n16.csv");
            rec.write_events_csv(&out)?;
            println!("        events written to {}", out.display());
        }
    }
    Ok(())
}
