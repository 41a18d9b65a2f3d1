fn main() {
    std::process::exit(gchash::cli::run(std::env::args_os()));
}
