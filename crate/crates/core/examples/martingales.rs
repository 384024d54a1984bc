//! Compensated jump counts of a simulated game: the scaled martingales
//! should have mean zero.

use std::sync::Arc;

use finite_mfg::hjb_n::solve_hjb_n;
use finite_mfg::simulator::{martingale_paths, simulate, Initial, PolicySpec, RecordLevel, Seed};
use finite_mfg::stats::{mean, std_error};
use finite_mfg::ModelSpec;

fn main() -> finite_mfg::Result<()> {
    let model = ModelSpec::two_state_congestion();
    let n = 10;
    let policy = PolicySpec::ExactNash(Arc::new(solve_hjb_n(&model, n, 1e-3)?));
    let mut arrivals = vec![Vec::new(); model.d];
    for r in 0..500 {
        let rec = simulate(&model, n, &policy, &Initial::iid(&[0.5, 0.5]), Seed::new(1, r), RecordLevel::Measures)?;
        let mp = martingale_paths(&model, &rec, &policy, 1e-3)?;
        for (x, a) in arrivals.iter_mut().enumerate() {
            a.push(mp.terminal_arrival()[x]);
        }
    }
    for (x, a) in arrivals.iter().enumerate() {
        println!("M_{x}(T): mean {:+.4} +- {:.4}", mean(a), std_error(a));
    }
    Ok(())
}
