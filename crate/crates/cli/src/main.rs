fn main() {
    std::process::exit(smagnet_cli::run(std::env::args()));
}
