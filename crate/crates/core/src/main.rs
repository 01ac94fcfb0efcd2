fn main() {
    std::process::exit(coarse2fine::cli::run(std::env::args_os()));
}
