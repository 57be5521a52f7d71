fn main() {
    std::process::exit(crw_cli::run_command(std::env::args()));
}
