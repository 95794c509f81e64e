fn main() {
    std::process::exit(qtk_cli::main_with_args(std::env::args_os()));
}
