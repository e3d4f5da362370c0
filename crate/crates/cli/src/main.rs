fn main() {
    std::process::exit(eub_cli::run(std::env::args_os()));
}
