fn main() {
    std::process::exit(hybrid_ident::cli::main_with_args(std::env::args_os()));
}
