fn main() {
    std::process::exit(satfuse::cli::run(std::env::args_os()));
}
