fn main() -> std::process::ExitCode {
    mslm_cli::main_with_args(std::env::args_os())
}
