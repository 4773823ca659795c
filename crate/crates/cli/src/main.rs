fn main() {
    std::process::exit(c3po_cli::main_with_args(std::env::args_os()));
}
