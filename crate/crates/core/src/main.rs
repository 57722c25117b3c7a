use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let env = |k: &str| std::env::var(k).ok();
    let code = treeqa_core::cli::run(std::env::args_os(), &env, &mut std::io::stdout(), &mut std::io::stderr());
    ExitCode::from(code as u8)
}
