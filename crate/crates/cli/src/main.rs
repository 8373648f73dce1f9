fn main() {
    std::process::exit(tapnet_cli::run(std::env::args_os().collect()));
}
