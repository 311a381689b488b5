fn main() {
    std::process::exit(ordchange_cli::run(std::env::args_os()));
}
