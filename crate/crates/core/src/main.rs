fn main() -> std::process::ExitCode {
    untl::cli::main()
}
