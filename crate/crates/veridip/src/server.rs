//! Minimal JSON prediction endpoint over an immutable model.
//!
//! `GET /health` answers `ok`; `POST /predict` takes `{"features": [[..], ..]}`
//! and answers `{"probs": [[..], ..]}`.

use std::io::Read;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use tiny_http::{Header, Method, Request, Response, Server};
use veridip_core::MlpModel;

/// Largest request body accepted, in bytes.
pub const MAX_BODY: usize = 32 << 20;

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictRequest {
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictResponse {
    pub probs: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

struct Shared {
    model: MlpModel,
    queries: AtomicU64,
    stopping: AtomicBool,
}

pub struct PredictServer {
    server: Arc<Server>,
    shared: Arc<Shared>,
    workers: Vec<JoinHandle<()>>,
    addr: SocketAddr,
}

fn json_header() -> Header {
    Header::from_bytes("Content-Type", "application/json").expect("static header")
}

fn json_response<T: Serialize>(status: u16, body: &T) -> Response<std::io::Cursor<Vec<u8>>> {
    let bytes = serde_json::to_vec(body).expect("serializable body");
    Response::from_data(bytes).with_status_code(status).with_header(json_header())
}

fn error_response(status: u16, msg: impl Into<String>) -> Response<std::io::Cursor<Vec<u8>>> {
    json_response(status, &ErrorBody { error: msg.into() })
}

fn predict(shared: &Shared, body: &[u8]) -> Response<std::io::Cursor<Vec<u8>>> {
    let req: PredictRequest = match serde_json::from_slice(body) {
        Ok(r) => r,
        Err(e) => return error_response(400, format!("invalid request JSON: {e}")),
    };
    let width = shared.model.input_dim();
    if let Some((i, row)) = req.features.iter().enumerate().find(|(_, r)| r.len() != width) {
        return error_response(
            400,
            format!("row {i} has {} features, expected width {width}", row.len()),
        );
    }
    match shared.model.forward_proba(&req.features) {
        Ok(probs) => {
            shared.queries.fetch_add(probs.len() as u64, Ordering::SeqCst);
            json_response(200, &PredictResponse { probs })
        }
        Err(e) => error_response(400, e.to_string()),
    }
}

fn handle(shared: &Shared, mut request: Request) {
    let path = request.url().split('?').next().unwrap_or("").to_string();
    let response = match (request.method(), path.as_str()) {
        (Method::Get, "/health") => Response::from_string("ok"),
        (Method::Post, "/predict") => {
            let mut body = Vec::new();
            let read = request.as_reader().take(MAX_BODY as u64 + 1).read_to_end(&mut body);
            match read {
                Err(e) => error_response(400, format!("failed to read body: {e}")),
                Ok(_) if body.len() > MAX_BODY => error_response(413, "request body too large"),
                Ok(_) => predict(shared, &body),
            }
        }
        (_, "/health") | (_, "/predict") => error_response(405, "method not allowed"),
        _ => error_response(404, format!("no route for {path}")),
    };
    // a client that hung up is not our problem
    let _ = request.respond(response);
}

impl PredictServer {
    /// Binds `addr` (e.g. `127.0.0.1:0`) and starts `threads` workers.
    pub fn start(model: MlpModel, addr: &str, threads: usize) -> std::io::Result<Self> {
        let server = Server::http(addr).map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("server is not bound to an IP address"))?;
        let server = Arc::new(server);
        let shared = Arc::new(Shared {
            model,
            queries: AtomicU64::new(0),
            stopping: AtomicBool::new(false),
        });
        let workers = (0..threads.max(1))
            .map(|_| {
                let server = Arc::clone(&server);
                let shared = Arc::clone(&shared);
                std::thread::spawn(move || {
                    while let Ok(req) = server.recv() {
                        if shared.stopping.load(Ordering::SeqCst) {
                            break;
                        }
                        handle(&shared, req);
                    }
                })
            })
            .collect();
        Ok(Self { server, shared, workers, addr })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Rows answered so far.
    pub fn query_count(&self) -> u64 {
        self.shared.queries.load(Ordering::SeqCst)
    }

    /// Blocks until the workers exit.
    pub fn wait(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stopping.store(true, Ordering::SeqCst);
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for PredictServer {
    fn drop(&mut self) {
        if !self.workers.is_empty() {
            self.stop();
        }
    }
}
