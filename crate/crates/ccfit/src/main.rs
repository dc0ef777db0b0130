fn main() {
    let code = ccfit::cli::main_with_args(std::env::args().collect());
    std::process::exit(code);
}
