fn main() {
    std::process::exit(dirinet::cli::run(std::env::args_os()));
}
