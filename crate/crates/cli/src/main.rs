fn main() {
    std::process::exit(saq_cli::run(std::env::args_os()));
}
