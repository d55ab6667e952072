fn main() -> std::process::ExitCode {
    perturbdag::cli::main()
}
