fn main() {
    std::process::exit(transvw::cli::main_with(std::env::args_os()));
}
