fn main() {
    std::process::exit(crossmae::cli::run(std::env::args_os()));
}
