fn main() {
    std::process::exit(stripdet::cli::cli_main(std::env::args().collect()));
}
