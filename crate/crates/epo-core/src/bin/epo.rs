use epo_core::cli::cli_dispatch;

fn main() {
    // Die quietly when stdout closes early (e.g. piped into `head`), like
    // every other line-oriented tool.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    std::process::exit(cli_dispatch(std::env::args_os()));
}
