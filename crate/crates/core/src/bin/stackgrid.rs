fn main() {
    std::process::exit(stackgrid::cli::main_with_args(std::env::args_os()));
}
