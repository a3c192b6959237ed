fn main() {
    std::process::exit(agedg::cli::run_cli(std::env::args()));
}
