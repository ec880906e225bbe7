fn main() {
    std::process::exit(se2vae::cli::run(std::env::args_os()));
}
