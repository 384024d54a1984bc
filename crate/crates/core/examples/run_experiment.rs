//! Drive an experiment from a JSON config, as the `mfg` binary does.
//!
//! cargo run --release --example run_experiment -- examples/configs/decoupled.json

use finite_mfg::experiments::{run, ExperimentConfig};

fn main() -> finite_mfg::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "examples/configs/decoupled.json".into());
    let mut cfg = ExperimentConfig::from_file(&path)?;
    cfg.out = std::env::temp_dir().join("mfg_example");
    let model = cfg.resolve()?;
    let report = run(&cfg)?;
    print!("{}", report.table.render());
    for f in report.write(&cfg, &model)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}
