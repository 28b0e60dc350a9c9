fn main() {
    std::process::exit(demc::cli::run(std::env::args_os()));
}
