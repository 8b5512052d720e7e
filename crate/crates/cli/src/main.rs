fn main() {
    std::process::exit(eaft_cli::main_with(std::env::args_os()));
}
