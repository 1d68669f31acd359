fn main() {
    std::process::exit(gvilm::cli::run(std::env::args_os()));
}
