fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(scenelayers_cli::main_with(std::env::args_os()))
}
