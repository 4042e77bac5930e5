fn main() {
    std::process::exit(sympsteer::cli::run(std::env::args_os()));
}
