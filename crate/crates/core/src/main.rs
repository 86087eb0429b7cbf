use std::process::ExitCode;

fn main() -> ExitCode {
    umblt_core::cli::run_cli()
}
