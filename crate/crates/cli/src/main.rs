fn main() -> std::process::ExitCode {
    smanet_cli::main()
}
