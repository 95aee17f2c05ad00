fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CINP_LOG", "info")).init();
    std::process::exit(cinp::cli::run(std::env::args_os()));
}
