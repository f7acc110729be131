fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("COST_LOG", "info")).init();
    std::process::exit(cost::cli::main_with_args(std::env::args_os()));
}
