fn main() {
    std::process::exit(irgrid::cli::run_from(std::env::args_os()));
}
