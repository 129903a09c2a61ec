fn main() {
    std::process::exit(varbound_cli::run(std::env::args_os()));
}
