fn main() {
    std::process::exit(gnnformer_cli::main_with_args(std::env::args_os()));
}
