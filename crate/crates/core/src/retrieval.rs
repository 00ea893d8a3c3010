//! Image-to-model retrieval: top-k classification over a trained network,
//! as a library call and a small HTTP service.

use std::io::Read;
use std::net::SocketAddr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tiny_http::{Header, Method, Request, Response, Server};

use crate::image::{self, Image};
use crate::nn::weights::load_weights;
use crate::nn::{Network, NnError, Tensor};
use crate::render;

pub const MIN_QUERY_SIDE: usize = 16;
pub const DEFAULT_K: usize = 5;
pub const DEFAULT_BODY_LIMIT: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("image is {width}×{height}; both sides must be at least {MIN_QUERY_SIDE} pixels")]
    TooSmall { width: usize, height: usize },
    #[error("k = {k} must be between 1 and {classes}")]
    BadK { k: usize, classes: usize },
    #[error("model index is corrupt: {0}")]
    IndexCorrupt(String),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error("cannot start server on {addr}: {message}")]
    Bind { addr: String, message: String },
}

/// One retrievable class: its label and, when known, the source STL and a
/// preview render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub label: String,
    pub source_path: Option<PathBuf>,
    pub preview_path: Option<PathBuf>,
}

/// A trained network with its class table. Immutable once loaded.
#[derive(Debug, Clone)]
pub struct ModelIndex {
    pub weights_path: PathBuf,
    pub network: Network<f32>,
    pub models: Vec<ModelEntry>,
}

/// Prefer the equatorial front view as the preview, else the first PNG.
fn preview_in(dir: &Path) -> Option<PathBuf> {
    let front = dir.join("0_0.png");
    if front.is_file() {
        return Some(front);
    }
    let mut pngs: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    pngs.sort();
    pngs.into_iter().next()
}

impl ModelIndex {
    /// Loads weights and pairs each embedded label with
    /// `<render_root>/<label>/` for its preview and source STL.
    pub fn load(weights_path: &Path, render_root: Option<&Path>) -> Result<Self, RetrievalError> {
        let network = load_weights(weights_path)
            .map_err(|e| RetrievalError::IndexCorrupt(format!("{}: {e}", weights_path.display())))?;
        Self::from_network(network, weights_path, render_root)
    }

    pub fn from_network(
        network: Network<f32>,
        weights_path: &Path,
        render_root: Option<&Path>,
    ) -> Result<Self, RetrievalError> {
        let labels = &network.config.labels;
        if labels.len() != network.config.num_classes {
            return Err(RetrievalError::IndexCorrupt(format!(
                "{} labels for a {}-way classifier",
                labels.len(),
                network.config.num_classes
            )));
        }
        let models = labels
            .iter()
            .map(|label| {
                let dir = render_root.map(|r| r.join(label));
                ModelEntry {
                    label: label.clone(),
                    source_path: dir
                        .as_deref()
                        .and_then(render::read_manifest)
                        .and_then(|m| m.source_path),
                    preview_path: dir.as_deref().and_then(preview_in),
                }
            })
            .collect();
        Ok(Self {
            weights_path: weights_path.to_path_buf(),
            network,
            models,
        })
    }

    pub fn labels(&self) -> Vec<&str> {
        self.models.iter().map(|m| m.label.as_str()).collect()
    }

    pub fn input_side(&self) -> usize {
        self.network.config.input.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub label: String,
    pub probability: f32,
    pub preview: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub results: Vec<Hit>,
    pub k: usize,
    pub elapsed_ms: f64,
}

/// Center-crop, resize to `side`, scale to [0, 1]: the training pipeline's
/// tensor path.
pub fn preprocess_query(img: &Image, side: usize) -> Result<Tensor<f32>, RetrievalError> {
    if img.width < MIN_QUERY_SIDE || img.height < MIN_QUERY_SIDE {
        return Err(RetrievalError::TooSmall {
            width: img.width,
            height: img.height,
        });
    }
    let data = image::to_chw(&image::fit_square(img, side));
    Ok(Tensor::from_vec(&[3, side, side], data).expect("three planes of side²"))
}

pub fn query(index: &ModelIndex, img: &Image, k: usize) -> Result<QueryResult, RetrievalError> {
    let start = Instant::now();
    let classes = index.models.len();
    if k == 0 || k > classes {
        return Err(RetrievalError::BadK { k, classes });
    }
    let sample = preprocess_query(img, index.input_side())?;
    let ranked = index.network.predict_topk(&sample, k).map_err(|e| match e {
        NnError::BadK { k, classes } => RetrievalError::BadK { k, classes },
        other => RetrievalError::IndexCorrupt(other.to_string()),
    })?;
    let results = ranked
        .into_iter()
        .map(|(i, p)| {
            let m = &index.models[i];
            Hit {
                label: m.label.clone(),
                probability: p,
                preview: m.preview_path.clone(),
            }
        })
        .collect();
    Ok(QueryResult {
        results,
        k,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServeOptions {
    pub body_limit: usize,
    pub workers: usize,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            body_limit: DEFAULT_BODY_LIMIT,
            workers: 4,
        }
    }
}

/// A running retrieval service. Dropping the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the workers exit (they only exit on shutdown).
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_workers();
    }

    fn stop_workers(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_workers();
    }
}

/// Serves `POST /query[?k=N]` (PNG or JPEG body), `GET /healthz` and
/// `GET /classes` on `addr`. Port 0 picks a free port; see
/// [`ServerHandle::addr`].
pub fn serve(index: Arc<ModelIndex>, addr: &str, options: ServeOptions) -> Result<ServerHandle, RetrievalError> {
    let server = Server::http(addr).map_err(|e| RetrievalError::Bind {
        addr: addr.to_string(),
        message: e.to_string(),
    })?;
    let bound = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| RetrievalError::Bind {
            addr: addr.to_string(),
            message: "not an IP listener".into(),
        })?;
    let server = Arc::new(server);
    let stop = Arc::new(AtomicBool::new(false));
    let workers = (0..options.workers.max(1))
        .map(|_| {
            let (server, stop, index) = (server.clone(), stop.clone(), index.clone());
            std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match server.recv_timeout(Duration::from_millis(50)) {
                        Ok(Some(request)) => respond(&index, &options, request),
                        Ok(None) => {}
                        Err(e) => {
                            log::error!("accept failed: {e}");
                            break;
                        }
                    }
                }
            })
        })
        .collect();
    log::info!("serving {} classes on http://{bound}", index.models.len());
    Ok(ServerHandle {
        addr: bound,
        stop,
        workers,
    })
}

struct Reply {
    status: u16,
    body: String,
}

impl Reply {
    fn json(status: u16, value: &impl Serialize) -> Self {
        Self {
            status,
            body: serde_json::to_string(value).unwrap_or_else(|_| r#"{"error":"internal error"}"#.into()),
        }
    }

    fn error(status: u16, message: impl Into<String>) -> Self {
        Self::json(status, &serde_json::json!({ "error": message.into() }))
    }
}

fn respond(index: &ModelIndex, options: &ServeOptions, mut request: Request) {
    let reply = catch_unwind(AssertUnwindSafe(|| route(index, options, &mut request))).unwrap_or_else(|_| {
        log::error!("handler panicked on {} {}", request.method(), request.url());
        Reply::error(500, "internal error")
    });
    let content_type = if reply.status == 200 && request.url() == "/healthz" {
        "text/plain; charset=utf-8"
    } else {
        "application/json"
    };
    let response = Response::from_string(reply.body)
        .with_status_code(reply.status)
        .with_header(Header::from_bytes("Content-Type", content_type).expect("static header"));
    if let Err(e) = request.respond(response) {
        log::warn!("failed to send response: {e}");
    }
}

fn query_param<'a>(url: &'a str, name: &str) -> Option<&'a str> {
    let (_, qs) = url.split_once('?')?;
    qs.split('&')
        .filter_map(|pair| pair.split_once('='))
        .find(|(key, _)| *key == name)
        .map(|(_, v)| v)
}

fn route(index: &ModelIndex, options: &ServeOptions, request: &mut Request) -> Reply {
    let url = request.url().to_string();
    let path = url.split('?').next().unwrap_or("");
    match (request.method(), path) {
        (Method::Get, "/healthz") => Reply {
            status: 200,
            body: "ok".into(),
        },
        (Method::Get, "/classes") => Reply::json(200, &index.labels()),
        (Method::Post, "/query") => {
            let k = match query_param(&url, "k") {
                None => DEFAULT_K.min(index.models.len()),
                Some(v) => match v.parse::<usize>() {
                    Ok(k) => k,
                    Err(_) => return Reply::error(400, format!("k must be a positive integer, got '{v}'")),
                },
            };
            if request.body_length().is_some_and(|n| n > options.body_limit) {
                return Reply::error(413, format!("body exceeds {} bytes", options.body_limit));
            }
            let mut body = Vec::new();
            let limit = options.body_limit as u64 + 1;
            if let Err(e) = request.as_reader().take(limit).read_to_end(&mut body) {
                return Reply::error(400, format!("cannot read body: {e}"));
            }
            if body.len() > options.body_limit {
                return Reply::error(413, format!("body exceeds {} bytes", options.body_limit));
            }
            let img = match Image::decode(&body) {
                Ok(img) => img,
                Err(_) => return Reply::error(400, "body is not a decodable PNG or JPEG image"),
            };
            match query(index, &img, k) {
                Ok(result) => Reply::json(200, &result),
                Err(e @ (RetrievalError::BadK { .. } | RetrievalError::TooSmall { .. })) => Reply::error(400, e.to_string()),
                Err(e) => {
                    log::error!("query failed: {e}");
                    Reply::error(500, "internal error")
                }
            }
        }
        (_, "/query" | "/healthz" | "/classes") => Reply::error(405, "method not allowed"),
        _ => Reply::error(404, "not found"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_alexnet, Preset};

    fn index(classes: usize) -> ModelIndex {
        let mut cfg = build_alexnet(classes, Preset::Desk).unwrap();
        cfg.labels = (0..classes).map(|i| format!("model_{i}")).collect();
        ModelIndex::from_network(Network::init(cfg, 3).unwrap(), Path::new("w.bin"), None).unwrap()
    }

    #[test]
    fn preprocess_crops_and_rejects_tiny() {
        let mut wide = Image::filled(1000, 500, [0; 3]);
        for y in 0..500 {
            for x in 250..750 {
                wide.set(x, y, [255; 3]);
            }
        }
        let t = preprocess_query(&wide, 64).unwrap();
        assert_eq!(t.shape(), &[3, 64, 64]);
        assert!(t.data().iter().all(|&v| v == 1.0));
        assert!(matches!(
            preprocess_query(&Image::filled(10, 10, [0; 3]), 64),
            Err(RetrievalError::TooSmall { .. })
        ));
    }

    #[test]
    fn single_class_is_certain() {
        let idx = index(1);
        let r = query(&idx, &Image::filled(64, 64, [40; 3]), 1).unwrap();
        assert_eq!(r.results.len(), 1);
        assert_eq!(r.results[0].label, "model_0");
        assert_eq!(r.results[0].probability, 1.0);
    }

    #[test]
    fn k_beyond_classes_is_rejected() {
        let idx = index(3);
        let img = Image::filled(32, 32, [0; 3]);
        assert!(matches!(query(&idx, &img, 4), Err(RetrievalError::BadK { k: 4, classes: 3 })));
        assert!(matches!(query(&idx, &img, 0), Err(RetrievalError::BadK { .. })));
    }

    #[test]
    fn smaller_k_is_a_prefix() {
        let idx = index(6);
        let mut img = Image::filled(80, 80, [128; 3]);
        for i in 10..60 {
            img.set(i, i, [250, 10, 10]);
        }
        let full = query(&idx, &img, 6).unwrap();
        for k in 1..6 {
            assert_eq!(query(&idx, &img, k).unwrap().results, full.results[..k]);
        }
        assert!(full.results.windows(2).all(|w| w[0].probability >= w[1].probability));
    }

    #[test]
    fn query_params() {
        assert_eq!(query_param("/query?k=3", "k"), Some("3"));
        assert_eq!(query_param("/query?x=1&k=2", "k"), Some("2"));
        assert_eq!(query_param("/query", "k"), None);
    }
}
