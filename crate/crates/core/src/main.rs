fn main() {
    std::process::exit(vocoguard::cli::run(std::env::args_os()));
}
