fn main() {
    std::process::exit(moelora::cli::run());
}
