fn main() {
    std::process::exit(featdyn_cli::main_with(std::env::args_os()));
}
