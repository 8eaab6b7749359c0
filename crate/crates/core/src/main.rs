fn main() {
    std::process::exit(mdalbench::cli::run_cli(std::env::args_os()));
}
