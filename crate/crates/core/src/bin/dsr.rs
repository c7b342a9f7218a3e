fn main() {
    std::process::exit(dsr_core::cli::main_with_args(std::env::args_os()));
}
