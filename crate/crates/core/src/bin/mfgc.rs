fn main() {
    std::process::exit(mfgc_lab::cli::main_with_args(std::env::args_os()));
}
