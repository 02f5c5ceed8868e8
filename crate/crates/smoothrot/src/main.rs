fn main() {
    std::process::exit(smoothrot::cli::main_with_args(std::env::args_os()));
}
