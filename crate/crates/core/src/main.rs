fn main() {
    std::process::exit(ctxasr::cli::run_command(std::env::args_os()));
}
