fn main() {
    std::process::exit(coda_forecast::cli::main_with_args(std::env::args_os()));
}
