fn main() {
    std::process::exit(fecim::cli::run(std::env::args_os()));
}
