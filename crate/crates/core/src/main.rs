fn main() {
    std::process::exit(latentflow::cli::run());
}
