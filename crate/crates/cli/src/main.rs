fn main() {
    std::process::exit(advdenoise_cli::run(std::env::args_os()));
}
