fn main() {
    std::process::exit(nsft_cli::dispatch(std::env::args_os()));
}
