fn main() {
    std::process::exit(sarnet_cli::run(std::env::args_os()));
}
