fn main() {
    let code = damflow::cli::run(std::env::args_os());
    std::process::exit(code);
}
