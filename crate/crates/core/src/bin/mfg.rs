fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(finite_mfg::cli::run_cli(std::env::args_os()) as u8)
}
