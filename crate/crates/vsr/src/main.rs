fn main() {
    std::process::exit(vsr::cli::main_with(std::env::args_os().collect()));
}
