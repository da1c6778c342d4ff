fn main() {
    std::process::exit(ftta_cli::run(std::env::args_os()));
}
