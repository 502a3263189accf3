fn main() -> std::process::ExitCode {
    rqspeech::cli::main()
}
