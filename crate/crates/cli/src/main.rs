fn main() {
    std::process::exit(unveil_cli::run(std::env::args_os()));
}
