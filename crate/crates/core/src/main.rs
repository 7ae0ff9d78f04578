fn main() -> std::process::ExitCode {
    freeboost::cli::main_with_args(std::env::args_os())
}
