fn main() {
    std::process::exit(tgnn4i::cli::run_from(std::env::args_os()));
}
