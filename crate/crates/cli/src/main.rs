fn main() {
    std::process::exit(revela_cli::run(std::env::args_os()));
}
