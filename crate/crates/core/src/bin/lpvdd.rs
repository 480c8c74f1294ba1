fn main() {
    std::process::exit(lpvdd::cli::run());
}
