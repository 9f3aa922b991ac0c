use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    let argv: Vec<std::ffi::OsString> = std::env::args_os().collect();
    let verbose: usize = argv
        .iter()
        .skip(1)
        .filter_map(|a| a.to_str())
        .map(|a| match a.strip_prefix('-') {
            Some("-verbose") => 1,
            Some(v) if !v.is_empty() && v.chars().all(|c| c == 'v') => v.len(),
            _ => 0,
        })
        .sum();
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default)).init();
    // unlocked handles: worker threads log to stderr while a command runs
    let code = patchtrace::cli::dispatch(argv, &mut io::stdout(), &mut io::stderr());
    ExitCode::from(code as u8)
}
