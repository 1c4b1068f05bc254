fn main() {
    std::process::exit(segembed::cli::run(std::env::args().collect()));
}
