fn main() {
    std::process::exit(veridip::cli::run(std::env::args().collect()));
}
