fn main() {
    std::process::exit(bittol::cli::run(std::env::args_os()));
}
