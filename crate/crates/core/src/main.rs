fn main() {
    std::process::exit(xmodal::cli::run_cli(std::env::args_os()));
}
