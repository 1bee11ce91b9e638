fn main() -> std::process::ExitCode {
    mla_upcycle::cli::main()
}
