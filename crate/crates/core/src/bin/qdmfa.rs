fn main() {
    std::process::exit(qdmfa::cli::run(std::env::args_os()));
}
