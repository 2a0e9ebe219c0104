fn main() {
    std::process::exit(dpsqkd_cli::run(std::env::args_os()));
}
