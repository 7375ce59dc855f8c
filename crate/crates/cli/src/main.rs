fn main() {
    std::process::exit(lawfit_cli::run_cli(std::env::args_os()));
}
