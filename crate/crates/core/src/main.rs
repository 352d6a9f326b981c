fn main() {
    std::process::exit(erasehash::cli::run(std::env::args()));
}
