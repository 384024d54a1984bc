//! Command-line front end of the experiment runner.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

use crate::experiments::{self, Experiment, ExperimentConfig};
use crate::simulator::RecordLevel;

#[derive(Parser, Debug)]
#[command(name = "mfg", version, about = "Finite-state mean-field game experiments")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// solve-hjb, solve-mfg, simulate, converge, coupling, fluctuations or residual.
    #[arg(long)]
    experiment: Option<String>,
    /// Comma-separated player counts, e.g. 4,8,16.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    /// Replications per player count.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// events, measures or summary.
    #[arg(long)]
    record_level: Option<String>,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERICAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

fn usage(msg: impl std::fmt::Display) -> i32 {
    eprintln!("mfg: {msg}");
    EXIT_USAGE
}

/// Parses `args` (program name first), runs the experiment and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut cfg = match ExperimentConfig::from_file(&cli.config) {
        Ok(c) => c,
        Err(e) => return usage(e),
    };
    if let Some(name) = &cli.experiment {
        match name.parse::<Experiment>() {
            Ok(e) => cfg.experiment = e,
            Err(e) => return usage(e),
        }
    }
    if let Some(level) = &cli.record_level {
        match level.parse::<RecordLevel>() {
            Ok(l) => cfg.record_level = l,
            Err(e) => return usage(e),
        }
    }
    if let Some(n) = cli.n {
        cfg.n = n;
    }
    if let Some(r) = cli.reps {
        cfg.reps = r;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = Some(j);
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    let model = match cfg.resolve() {
        Ok(m) => m,
        Err(e) => return usage(e),
    };
    if let Some(j) = cfg.jobs {
        if j == 0 {
            return usage("--jobs must be positive");
        }
        // The global pool can only be set once per process; later calls keep it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }

    println!("experiment {} on {} (d={}, T={})", cfg.experiment, cfg.model.display(), model.d, model.horizon);
    let report = match experiments::run(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("mfg: numerical failure: {e}");
            return EXIT_NUMERICAL;
        }
    };
    print!("{}", report.table.render());
    match report.write(&cfg, &model) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("mfg: cannot write results: {e}");
            EXIT_NUMERICAL
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ModelSpec;
    use std::path::Path;
    use std::time::Instant;

    fn setup(dir: &Path, model: &ModelSpec, cfg: &str) -> PathBuf {
        std::fs::write(dir.join("model.json"), model.to_json().unwrap()).unwrap();
        let path = dir.join("config.json");
        std::fs::write(&path, cfg).unwrap();
        path
    }

    fn args(cfg: &Path, extra: &[&str]) -> Vec<String> {
        let mut v = vec!["mfg".to_string(), "--config".into(), cfg.display().to_string()];
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    }

    #[test]
    fn missing_model_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"model": "absent.json", "experiment": "converge"}"#).unwrap();
        assert_eq!(run_cli(args(&cfg, &[])), EXIT_USAGE);
        assert_eq!(run_cli(["mfg", "--config", "/nonexistent/config.json"]), EXIT_USAGE);
        assert_eq!(run_cli(["mfg"]), EXIT_USAGE);
    }

    #[test]
    fn bad_flags_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = ModelSpec::decoupled(2, 1.0, 0.5).unwrap();
        let cfg = setup(dir.path(), &m, r#"{"model": "model.json", "experiment": "converge"}"#);
        assert_eq!(run_cli(args(&cfg, &["--experiment", "plot"])), EXIT_USAGE);
        assert_eq!(run_cli(args(&cfg, &["--record-level", "all"])), EXIT_USAGE);
        assert_eq!(run_cli(args(&cfg, &["--n", "1,4"])), EXIT_USAGE);
        assert_eq!(run_cli(args(&cfg, &["--n", "four"])), EXIT_USAGE);
    }

    #[test]
    fn capacity_failure_is_numerical() {
        let dir = tempfile::tempdir().unwrap();
        let m = ModelSpec::decoupled(5, 1.0, 0.5).unwrap();
        let cfg = setup(dir.path(), &m, r#"{"model": "model.json", "experiment": "solve-hjb", "n": [400]}"#);
        let out = dir.path().join("out");
        assert_eq!(run_cli(args(&cfg, &["--out", out.to_str().unwrap()])), EXIT_NUMERICAL);
    }

    #[test]
    fn decoupled_converge_is_fast_and_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = ModelSpec::decoupled(2, 1.0, 0.5).unwrap();
        let cfg = setup(dir.path(), &m, r#"{"model": "model.json", "experiment": "converge", "n": [4, 8, 16]}"#);
        let out = dir.path().join("out");
        let start = Instant::now();
        assert_eq!(run_cli(args(&cfg, &["--out", out.to_str().unwrap()])), EXIT_OK);
        assert!(start.elapsed().as_secs_f64() < 10.0);
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("converge_summary.json")).unwrap()).unwrap();
        let rows = summary["summary"]["rows"].as_array().unwrap();
        assert_eq!(rows.len(), 3);
        for r in rows {
            assert!(r["sup_gap"].as_f64().unwrap() < 1e-8);
        }
        let csv = std::fs::read_to_string(out.join("converge.csv")).unwrap();
        assert!(csv.starts_with("# {"));
        assert!(csv.contains("\"model_spec\""));
    }

    #[test]
    fn fixed_seed_gives_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let m = ModelSpec::two_state_congestion();
        let cfg = setup(
            dir.path(),
            &m,
            r#"{"model": "model.json", "experiment": "simulate", "n": [5], "reps": 4, "dt": 0.01}"#,
        );
        let out = dir.path().join("out");
        let run = || {
            let code = run_cli(args(&cfg, &["--seed", "17", "--out", out.to_str().unwrap(), "--record-level", "events"]));
            assert_eq!(code, EXIT_OK);
            let mut files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
            files.sort();
            files.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>()
        };
        let first = run();
        let second = run();
        assert!(first.len() >= 6);
        assert_eq!(first, second);
    }
}
