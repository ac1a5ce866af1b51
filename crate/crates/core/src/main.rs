fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CMLM_LOG", "warn")).init();
    std::process::exit(cmlm::cli::run(std::env::args_os()));
}
