fn main() {
    let level = if std::env::args().any(|a| a == "-v" || a == "--verbose" || a.starts_with("-vv")) {
        "debug"
    } else {
        "warn"
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    std::process::exit(convtrans::cli::run(std::env::args_os()));
}
