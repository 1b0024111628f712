fn main() {
    std::process::exit(ibp::cli::run_cli(std::env::args_os()));
}
