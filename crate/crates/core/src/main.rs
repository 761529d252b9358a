fn main() {
    std::process::exit(smartsense::cli::run(std::env::args_os()));
}
