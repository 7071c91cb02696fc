fn main() {
    std::process::exit(slowfast::cli::run());
}
