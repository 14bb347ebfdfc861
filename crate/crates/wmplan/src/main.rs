fn main() {
    std::process::exit(wmplan::cli::run());
}
