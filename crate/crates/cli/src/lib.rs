//! Shared helpers for the command-line binaries.

/// Environment variable overriding `--log-level`.
pub const LOG_ENV: &str = "OFFLOAD_LOG";

/// Initializes logging from `OFFLOAD_LOG`, falling back to `default_level`.
pub fn init_logging(default_level: &str) {
    let level = std::env::var(LOG_ENV).unwrap_or_else(|_| default_level.to_string());
    env_logger::Builder::new().parse_filters(&level).format_timestamp_millis().init();
}

/// Splits a `;`- or `,`-separated address list.
pub fn parse_list(s: &str) -> Vec<String> {
    s.split([';', ',']).map(str::trim).filter(|a| !a.is_empty()).map(String::from).collect()
}
