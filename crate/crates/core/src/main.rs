fn main() {
    std::process::exit(pathvl::cli::main_with_args(std::env::args_os()));
}
