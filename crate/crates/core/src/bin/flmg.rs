fn main() {
    std::process::exit(flmg::cli::main_with_args(std::env::args_os()));
}
