fn main() {
    std::process::exit(recolor::cli::main_with_args(std::env::args_os()));
}
