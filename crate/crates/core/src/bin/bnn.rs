fn main() {
    std::process::exit(bnn_core::cli::main_with(std::env::args_os()));
}
