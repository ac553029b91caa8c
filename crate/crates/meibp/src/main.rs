fn main() -> std::process::ExitCode {
    meibp::cli::run()
}
