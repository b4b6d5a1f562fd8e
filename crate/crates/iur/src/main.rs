fn main() {
    std::process::exit(iur::cli::run());
}
