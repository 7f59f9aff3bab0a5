fn main() {
    std::process::exit(simref_cli::run_cli(std::env::args_os()));
}
