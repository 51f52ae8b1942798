use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BBENERGY_LOG", "warn")).init();
    bbenergy::cli::main_with(std::env::args_os())
}
