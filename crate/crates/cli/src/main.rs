fn main() {
    std::process::exit(hetfx_cli::main_with(std::env::args_os()));
}
