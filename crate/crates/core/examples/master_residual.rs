//! Residual of the master equation at random points, at two resolutions.

use finite_mfg::experiments::residual_samples;
use finite_mfg::master::FbOptions;
use finite_mfg::stats::{median, percentile};
use finite_mfg::ModelSpec;

fn main() -> finite_mfg::Result<()> {
    let model = ModelSpec::two_state_congestion();
    let base = FbOptions::for_model(&model);
    for (opts, fd) in [(base, 1e-4), (base.with_dt(1e-2).with_tol(1e-13), 1e-2)] {
        let s = residual_samples(&model, 40, 3, fd, &opts)?;
        let abs: Vec<f64> = s.iter().map(|r| r.residual.abs()).collect();
        println!(
            "dt={:.1e} fd={fd:.0e}: median |res| {:.2e}, p90 {:.2e}, max {:.2e}",
            opts.dt,
            median(&abs),
            percentile(&abs, 90.0),
            percentile(&abs, 100.0)
        );
    }
    Ok(())
}
