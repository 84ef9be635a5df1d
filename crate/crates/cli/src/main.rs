fn main() {
    std::process::exit(cinecav_cli::run(std::env::args_os()));
}
