fn main() {
    std::process::exit(ezdit_cli::run(std::env::args_os()));
}
