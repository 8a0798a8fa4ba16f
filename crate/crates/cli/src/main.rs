fn main() {
    std::process::exit(condflow_cli::run_command(std::env::args_os()));
}
