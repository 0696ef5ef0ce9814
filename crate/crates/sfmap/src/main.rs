fn main() {
    std::process::exit(sfmap::cli::run());
}
