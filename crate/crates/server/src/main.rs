use std::net::SocketAddr;

use clap::Parser;

/// Serves tvlab jobs over HTTP/JSON.
#[derive(Parser)]
#[command(name = "tvlab-server", version)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:7878")]
    addr: SocketAddr,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let listener = tokio::net::TcpListener::bind(args.addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    tokio::select! {
        r = tvlab_server::serve(listener) => r,
        _ = tokio::signal::ctrl_c() => Ok(()),
    }
}
