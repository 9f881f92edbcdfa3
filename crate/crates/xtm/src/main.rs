fn main() -> std::process::ExitCode {
    xtm::cli::run()
}
