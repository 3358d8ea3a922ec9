fn main() {
    std::process::exit(tmsv_metrology::cli::main_with_args(std::env::args_os()));
}
