fn main() {
    std::process::exit(branchseg_cli::main_with(std::env::args_os()));
}
