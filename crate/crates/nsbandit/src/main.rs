//! Binary entry point for the benchmark harness.

fn main() {
    std::process::exit(nsbandit::cli::run_cli(std::env::args_os()));
}
