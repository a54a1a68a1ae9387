fn main() {
    std::process::exit(dseg::cli::dispatch(std::env::args_os()));
}
