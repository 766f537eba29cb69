use std::process::ExitCode;

fn main() -> ExitCode {
    mulex::cli::main()
}
