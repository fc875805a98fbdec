fn main() {
    std::process::exit(alignfree_distill::cli::main_with_args(std::env::args_os()));
}
