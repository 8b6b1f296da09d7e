fn main() {
    std::process::exit(atom::cli::run(std::env::args_os()));
}
