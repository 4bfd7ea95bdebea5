fn main() {
    let code = dronekey::cli::run(std::env::args_os());
    std::process::exit(code);
}
