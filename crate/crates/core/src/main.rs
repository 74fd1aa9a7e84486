fn main() {
    std::process::exit(jointdiff::cli::main_with_args(std::env::args_os()));
}
