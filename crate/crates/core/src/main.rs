fn main() {
    std::process::exit(wq_surrogate::cli::run(std::env::args_os()));
}
