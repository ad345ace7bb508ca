fn main() {
    std::process::exit(fgmp_cli::run(std::env::args_os()));
}
