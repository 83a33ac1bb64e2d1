fn main() {
    std::process::exit(findna::cli::run());
}
