fn main() {
    std::process::exit(relu_mom::cli::main_with_args(std::env::args_os()));
}
