fn main() {
    std::process::exit(pixelhop_cli::run(std::env::args_os()));
}
