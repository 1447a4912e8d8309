use std::net::SocketAddr;

use wbal_service::{router, AppState, ServiceConfig, DEFAULT_UPLOAD_CAP_MB};

fn env_parse<T: std::str::FromStr>(name: &str) -> Result<Option<T>, String> {
    match std::env::var(name) {
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|_| format!("{name}: cannot parse `{v}`")),
        Err(_) => Ok(None),
    }
}

fn run() -> Result<(), String> {
    let bind: String = env_parse("WBAL_BIND")?.unwrap_or_else(|| "127.0.0.1".to_string());
    let port: u16 = env_parse("WBAL_PORT")?.unwrap_or(8080);
    let cap_mb: usize = env_parse("WBAL_UPLOAD_CAP_MB")?.unwrap_or(DEFAULT_UPLOAD_CAP_MB);
    let workers: Option<usize> = env_parse("WBAL_WORKERS")?;
    let snapshot_dir: Option<std::path::PathBuf> = env_parse("WBAL_SNAPSHOT_DIR")?;

    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    let addr: SocketAddr = format!("{bind}:{port}")
        .parse()
        .map_err(|e| format!("invalid bind address: {e}"))?;
    let config = ServiceConfig {
        upload_cap_bytes: cap_mb * 1024 * 1024,
        snapshot_dir,
    };

    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| format!("cannot bind {addr}: {e}"))?;
        eprintln!("listening on http://{addr}/v1");
        axum::serve(listener, router(AppState::new(config)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| e.to_string())
    })
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
