use std::io::Write;

fn main() {
    let outcome = jointstat_cli::run_command(std::env::args_os());
    std::io::stdout()
        .write_all(&outcome.stdout)
        .expect("write to stdout");
    eprint!("{}", outcome.stderr);
    std::process::exit(outcome.code);
}
