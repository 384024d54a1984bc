//! Integrate the linear fluctuation SDE along the mean-field flow under each
//! noise model and summarize the terminal law.

use finite_mfg::fluctuations::{sde_terminal_sample, summarize, NoiseModel, SdeCoefficients};
use finite_mfg::master::{mfg_flow, DirectMaster, FbOptions};
use finite_mfg::ModelSpec;

fn main() -> finite_mfg::Result<()> {
    let model = ModelSpec::two_state_congestion();
    let opts = FbOptions::for_model(&model);
    let (times, flow) = mfg_flow(&model, &[0.75, 0.25], &opts)?;
    let master = DirectMaster::new(&model);
    let coeffs = SdeCoefficients::along_flow(&model, &master, &times, &flow, 1e-2, 1e-3)?;
    for noise in [NoiseModel::IntensityScaled, NoiseModel::PairwiseJump, NoiseModel::Off] {
        let sample = sde_terminal_sample(&coeffs, &[0.0, 0.0], noise, 1000, 3)?;
        let s = summarize(&sample)?;
        println!("{noise:?}: mean {:+.4?} std {:.4?} |psi| p90 {:.4}", s.mean, s.std_dev, s.norm_percentiles[1]);
    }
    Ok(())
}
