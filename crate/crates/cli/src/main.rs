use std::process::ExitCode;

fn main() -> ExitCode {
    if let Some(n) = std::env::var("LAMP_THREADS").ok().and_then(|v| v.parse().ok()) {
        // Fails only if the pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    ExitCode::from(lamp_cli::run(std::env::args_os()) as u8)
}
