fn main() {
    std::process::exit(calm::cli::run(std::env::args_os()));
}
