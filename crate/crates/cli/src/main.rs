fn main() {
    std::process::exit(metapico_cli::main_with(std::env::args_os()));
}
