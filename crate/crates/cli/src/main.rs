fn main() {
    std::process::exit(softgrasp_cli::run(std::env::args_os()));
}
