fn main() {
    std::process::exit(pie_core::cli::main_with_args(std::env::args_os()));
}
