fn main() {
    cavl_cli::init_logging();
    std::process::exit(cavl_cli::run_cli(std::env::args_os()));
}
