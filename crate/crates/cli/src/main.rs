fn main() {
    std::process::exit(xmodal_cli::run(std::env::args_os()));
}
