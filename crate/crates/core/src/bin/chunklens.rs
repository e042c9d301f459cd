fn main() {
    std::process::exit(chunklens::cli::run(std::env::args_os()));
}
