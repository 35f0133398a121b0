fn main() {
    std::process::exit(spformer::cli::main_with_args(std::env::args_os()));
}
