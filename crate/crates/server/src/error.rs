use std::net::SocketAddr;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error(transparent)]
    Core(#[from] marich_core::Error),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("server on {addr} failed: {source}")]
    Runtime {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid server config: {0}")]
    Config(String),
}
