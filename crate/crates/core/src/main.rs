fn main() {
    std::process::exit(orderflow::cli::dispatch(std::env::args_os()));
}
