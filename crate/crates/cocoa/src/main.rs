fn main() -> std::process::ExitCode {
    cocoa::cli::main()
}
