fn main() {
    std::process::exit(xvden::cli::run(std::env::args_os()));
}
