fn main() {
    std::process::exit(mmhe::cli::run(std::env::args_os()));
}
