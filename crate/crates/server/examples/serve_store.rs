//! Serve the annotation and review API for one experiment config.
//!
//! Usage: cargo run -p camtrap-server --example serve_store -- CONFIG [ADDR]

use std::net::SocketAddr;
use std::sync::Arc;

use camtrap_core::config::load_config;
use camtrap_server::{serve, AppState, DEFAULT_ADDR};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let config_path = args.next().ok_or("usage: serve_store CONFIG [ADDR]")?;
    let addr: SocketAddr = args.next().as_deref().unwrap_or(DEFAULT_ADDR).parse()?;
    let config = load_config(config_path.as_ref())?;
    let state = Arc::new(AppState::from_config(&config, None));
    println!("GET http://{addr}/datasets, /experiments, /experiments/{{id}}/confusion");
    serve(state, addr).await?;
    Ok(())
}
