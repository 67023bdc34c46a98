fn main() {
    let code = livecomment::cli::run_cli(std::env::args_os());
    std::process::exit(code);
}
