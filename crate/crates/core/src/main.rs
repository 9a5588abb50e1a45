fn main() {
    std::process::exit(asymoe::cli::run(std::env::args_os()));
}
