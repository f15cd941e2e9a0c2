use clap::Parser;

use cipherlab::cli::{error_exit_code, execute, Cli};

fn main() {
    let code = match execute(Cli::parse()) {
        Ok(v) => v.exit_code(),
        Err(e) => {
            eprintln!("error: {e}");
            error_exit_code(&e)
        }
    };
    std::process::exit(code);
}
