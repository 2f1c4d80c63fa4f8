use tracing_subscriber::EnvFilter;

/// One JSON object per event on stderr. `MEDVL_LOG` takes an env-filter
/// directive and defaults to `info`.
pub fn init() {
    let filter = EnvFilter::try_from_env("MEDVL_LOG").unwrap_or_else(|_| EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_current_span(false)
        .try_init();
}
