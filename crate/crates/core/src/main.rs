use std::process::ExitCode;

fn main() -> ExitCode {
    dcgnet::cli::main_entry()
}
