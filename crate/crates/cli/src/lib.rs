//! Runner behind the `sffn` binary: configs, training and evaluation
//! commands, verification suites and routing analytics.

pub mod analyze;
pub mod config;
pub mod io;
pub mod run;
pub mod smoke;
pub mod verify;

/// `<crate version>-g<commit>` when built inside a git checkout.
pub fn version_string() -> &'static str {
    static VERSION: std::sync::OnceLock<String> = std::sync::OnceLock::new();
    VERSION.get_or_init(|| match option_env!("SFFN_GIT_REV") {
        Some(rev) if !rev.is_empty() => format!("{}-g{rev}", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    })
}

/// Worker cap from `SFFN_THREADS`; 1 when unset. Every run is
/// single-threaded, so this only bounds how many independent runs a caller
/// executes at once.
pub fn thread_cap() -> anyhow::Result<usize> {
    match std::env::var("SFFN_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => anyhow::bail!("SFFN_THREADS must be a positive integer, got {v:?}"),
        },
    }
}
