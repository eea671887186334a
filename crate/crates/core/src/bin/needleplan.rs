fn main() {
    std::process::exit(needleplan::cli::run(std::env::args_os()));
}
