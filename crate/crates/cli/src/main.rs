use std::io::{self, BufWriter};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let stdin = io::stdin();
    let mut input = stdin.lock();
    let mut output = BufWriter::new(io::stdout());
    let code = persona_mtl_cli::main_with_args(std::env::args_os(), &mut input, &mut output);
    drop(output);
    std::process::exit(code);
}
