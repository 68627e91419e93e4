fn main() {
    std::process::exit(gvae::cli::run(std::env::args_os()));
}
