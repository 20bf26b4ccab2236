fn main() {
    std::process::exit(ttprompt::cli::run_from_args(std::env::args_os()));
}
