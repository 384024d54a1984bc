//! Load a model from JSON, run the structural checks and evaluate a few
//! model quantities.
//!
//! cargo run --example model_validate -- examples/models/three_state.json

use finite_mfg::model::CheckStatus;
use finite_mfg::ModelSpec;

fn main() -> finite_mfg::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "examples/models/example.json".into());
    let model = ModelSpec::from_json_file(&path)?;
    println!("{path}: d={} T={} rates in [{}, {}]", model.d, model.horizon, model.a_lo, model.a_hi);

    let report = model.validate();
    for c in &report.checks {
        let tag = match c.status {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Unvalidated => "skip",
        };
        println!("  [{tag}] {:<24} worst {:+.3e}  {}", c.name, c.worst_value, c.detail);
    }

    let eta = vec![1.0 / model.d as f64; model.d];
    let p: Vec<f64> = (0..model.d).map(|y| 0.0 - y as f64).collect();
    let mut a = vec![0.0; model.d];
    model.optimal_rates_into(0, &p, &mut a);
    println!("a*(0, p={p:?}) = {a:?}");
    println!("H(0, uniform, p) = {:.6}", model.hamiltonian(0, &eta, &p));
    println!("g(0, uniform) = {:.6}", model.terminal(0, &eta));
    report.into_result()
}
