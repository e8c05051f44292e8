fn main() -> std::process::ExitCode {
    mvann_bench::cli::main()
}
