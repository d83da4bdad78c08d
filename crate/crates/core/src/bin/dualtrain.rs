fn main() -> std::process::ExitCode {
    dualtrain::cli::main()
}
