fn main() {
    std::process::exit(psm_cli::run(std::env::args_os()));
}
