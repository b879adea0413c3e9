use std::process::ExitCode;

fn main() -> ExitCode {
    qmtot::cli::main()
}
