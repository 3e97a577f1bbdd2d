fn main() {
    std::process::exit(aploc::cli::main_from(std::env::args_os()));
}
