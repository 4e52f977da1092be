use std::io;
use std::path::PathBuf;

use abc_core::cli::{run, OUT_DIR_ENV};

fn main() {
    let env_out = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from);
    let code = run(std::env::args_os(), env_out, &mut io::stdout().lock(), &mut io::stderr().lock());
    std::process::exit(code as i32);
}
