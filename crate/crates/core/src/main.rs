fn main() {
    std::process::exit(evomax::cli::run_cli(std::env::args_os()));
}
