use std::io::Write;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    let code = hesrn_cli::run(std::env::args_os(), &mut lock);
    let _ = lock.flush();
    std::process::exit(code);
}
