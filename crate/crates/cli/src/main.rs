fn main() {
    std::process::exit(clonejvp_cli::dispatch(std::env::args_os()));
}
