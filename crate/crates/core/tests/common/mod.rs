#![allow(dead_code)]

use axum::Router;
use url::Url;

/// Serves `app` on an ephemeral local port for the rest of the test.
pub async fn serve(app: Router) -> Url {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    Url::parse(&format!("http://{addr}")).unwrap()
}

/// A URL on which nothing listens.
pub fn dead_url() -> Url {
    let addr = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    Url::parse(&format!("http://{addr}")).unwrap()
}
