fn main() {
    std::process::exit(lipcert::cli::run(std::env::args_os()));
}
