fn main() {
    std::process::exit(nuta::cli::run(std::env::args_os()));
}
