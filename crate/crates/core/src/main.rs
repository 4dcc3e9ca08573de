fn main() -> std::process::ExitCode {
    saml_core::cli::main()
}
