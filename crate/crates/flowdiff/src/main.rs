use std::process::ExitCode;

fn main() -> ExitCode {
    flowdiff::cli::main_entry()
}
