fn main() {
    std::process::exit(sgfi::cli::run(std::env::args_os()));
}
