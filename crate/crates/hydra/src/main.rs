use std::io::Write;

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let hidden = matches!(argv.get(1).map(String::as_str), Some(hydra_core::monitor::SHIM_SUBCOMMAND | hydra_core::monitor::MONITOR_SUBCOMMAND));
    let daemon = argv.iter().any(|a| a == "--foreground");
    let level = if hidden || daemon { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format(|buf, record| {
            writeln!(buf, "{} {:<5} [{}] {}", hydra_core::now_ms(), record.level(), std::process::id(), record.args())
        })
        .init();
    if let Some(code) = hydra_core::monitor::run_hidden_subcommand(&argv) {
        std::process::exit(code);
    }
    std::process::exit(hydra::cli::main(argv));
}
