fn main() {
    std::process::exit(daqtrack::cli::main_with_args(std::env::args_os()));
}
