fn main() {
    std::process::exit(gatecomm::cli::main_with(std::env::args_os()));
}
