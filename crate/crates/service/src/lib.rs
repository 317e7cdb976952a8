//! HTTP inference service: sampling, space swaps, semantic edits and inversion
//! over an immutable checkpoint snapshot.

use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use lru::LruCache;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;

use dualgan::data::{decode_png, encode_png};
use dualgan::editing::{edit_sequence, DirectionSet};
use dualgan::inversion::{load_encoder, Encoder};
use dualgan::latent::MappedPair;
use dualgan::rng::{derive_seed, stream};
use dualgan::{Checkpoint, Error, GeneratorStack, Tensor, Var};

pub const DEFAULT_CAPACITY: usize = 1024;
pub const MAX_COUNT: usize = 64;
pub const MAX_STEPS: usize = 64;

/// JSON error body `{error, detail}` with an HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub error: &'static str,
    pub detail: String,
}

impl ApiError {
    fn bad_request(detail: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            error: "bad_request",
            detail: detail.into(),
        }
    }

    fn not_found(detail: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            error: "not_found",
            detail: detail.into(),
        }
    }

    fn unavailable(detail: impl Into<String>) -> Self {
        Self {
            status: StatusCode::SERVICE_UNAVAILABLE,
            error: "unavailable",
            detail: detail.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownAttribute(a) => Self::not_found(format!("unknown attribute `{a}`")),
            Error::Image { .. } | Error::Invalid(_) | Error::Shape { .. } => Self::bad_request(e.to_string()),
            other => Self {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                error: "internal",
                detail: other.to_string(),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.error, "detail": self.detail}))).into_response()
    }
}

type ApiResult = Result<Value, ApiError>;

/// A latent held by the session store.
#[derive(Clone, Debug)]
pub struct Session {
    pub codes: MappedPair<f32>,
    pub source: String,
    pub parent: Option<String>,
}

/// Model snapshot plus the session store; shared by all handlers.
pub struct Engine {
    gan: Arc<Checkpoint>,
    encoder: Option<Arc<Checkpoint>>,
    directions: Option<DirectionSet>,
    sessions: Mutex<LruCache<String, Session>>,
}

#[derive(Deserialize)]
struct SampleReq {
    seed: u64,
    #[serde(default = "one")]
    count: usize,
}

fn one() -> usize {
    1
}

#[derive(Deserialize)]
struct ResampleReq {
    id: String,
    space: String,
    seed: u64,
}

#[derive(Deserialize)]
struct EditReq {
    id: String,
    attribute: String,
    #[serde(default)]
    lambda_z: f64,
    #[serde(default)]
    lambda_p: f64,
    #[serde(default = "one")]
    steps: usize,
}

#[derive(Deserialize)]
struct InvertReq {
    image: String,
}

#[derive(Deserialize)]
pub struct F0Query {
    id: String,
}

fn hash_tensors(ts: &[&Tensor<f32>]) -> u64 {
    let mut h = derive_seed(0, "service", ts.len() as u64);
    for t in ts {
        for d in t.shape() {
            h = derive_seed(h, "", *d as u64);
        }
        for v in t.data() {
            h = derive_seed(h, "", v.to_bits() as u64);
        }
    }
    h
}

/// Content-derived id, so identical codes always get the same id.
pub fn session_id(codes: &MappedPair<f32>) -> String {
    format!("{:016x}", hash_tensors(&[&codes.z_plus, &codes.p_plus]))
}

fn png_b64(image: &Tensor<f32>) -> Result<String, ApiError> {
    Ok(STANDARD.encode(encode_png(image)?))
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

impl Engine {
    pub fn new(gan: Checkpoint, encoder: Option<Checkpoint>, directions: Option<DirectionSet>) -> Result<Self, Error> {
        Self::with_capacity(gan, encoder, directions, DEFAULT_CAPACITY)
    }

    pub fn with_capacity(
        gan: Checkpoint,
        encoder: Option<Checkpoint>,
        directions: Option<DirectionSet>,
        capacity: usize,
    ) -> Result<Self, Error> {
        // fail early on mismatched parts
        GeneratorStack::<f32>::from_checkpoint(&gan)?;
        if let Some(e) = &encoder {
            let enc = load_encoder(e)?;
            if enc.n != gan.config.n || enc.d != gan.config.d {
                return Err(Error::Shape {
                    what: "encoder codes".into(),
                    expected: vec![gan.config.n, gan.config.d],
                    got: vec![enc.n, enc.d],
                });
            }
        }
        if let Some(ds) = &directions {
            if ds.n != gan.config.n || ds.d != gan.config.d {
                return Err(Error::Shape {
                    what: "directions".into(),
                    expected: vec![gan.config.n, gan.config.d],
                    got: vec![ds.n, ds.d],
                });
            }
        }
        let cap = NonZeroUsize::new(capacity.max(1)).unwrap();
        Ok(Self {
            gan: Arc::new(gan),
            encoder: encoder.map(Arc::new),
            directions,
            sessions: Mutex::new(LruCache::new(cap)),
        })
    }

    fn stack(&self) -> Result<GeneratorStack<f32>, ApiError> {
        Ok(GeneratorStack::from_checkpoint(&self.gan)?)
    }

    fn encoder(&self) -> Result<Encoder<f32>, ApiError> {
        match &self.encoder {
            Some(c) => Ok(load_encoder(c)?),
            None => Err(ApiError::unavailable("no encoder loaded")),
        }
    }

    fn store(&self, codes: MappedPair<f32>, source: String, parent: Option<String>) -> String {
        let id = session_id(&codes);
        self.sessions
            .lock()
            .unwrap()
            .put(id.clone(), Session { codes, source, parent });
        id
    }

    pub fn session(&self, id: &str) -> Result<Session, ApiError> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown id `{id}`")))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    pub fn health(&self) -> ApiResult {
        let c = &self.gan.config;
        Ok(json!({
            "status": "ok",
            "step": self.gan.step,
            "config": {
                "n": c.n, "d": c.d, "heads": c.heads, "layers": c.layers,
                "resolution": c.resolution, "variant": c.variant.to_string(),
            },
            "encoder": self.encoder.is_some(),
            "directions": self.directions.as_ref().map_or(0, |d| d.directions.len()),
        }))
    }

    pub fn attributes(&self) -> ApiResult {
        let list: Vec<Value> = self
            .directions
            .iter()
            .flat_map(|ds| &ds.directions)
            .map(|d| {
                let space = |fit: &Option<dualgan::editing::SpaceFit>| {
                    fit.as_ref().map(|f| {
                        json!({
                            "validation_accuracy": f.validation_accuracy,
                            "train_accuracy": f.train_accuracy,
                            "low_confidence": f.low_confidence,
                            "lambda_range": [-3.0 * f.projection_std, 3.0 * f.projection_std],
                        })
                    })
                };
                json!({
                    "name": d.attribute,
                    "has_z": d.n_z.is_some(),
                    "has_p": d.n_p.is_some(),
                    "z": space(&d.fit.z),
                    "p": space(&d.fit.p),
                })
            })
            .collect();
        Ok(Value::Array(list))
    }

    pub fn sample(&self, body: &[u8]) -> ApiResult {
        let req: SampleReq = parse(body)?;
        if req.count == 0 || req.count > MAX_COUNT {
            return Err(ApiError::bad_request(format!("count must lie in 1..={MAX_COUNT}")));
        }
        let stack = self.stack()?;
        let mapped = stack.map_latents(&stack.sample_latents(req.seed, req.count)?)?;
        let images = stack.render(&mapped)?;
        let mut out = Vec::with_capacity(req.count);
        for i in 0..req.count {
            let id = self.store(mapped.select(i), format!("seed:{}:{i}", req.seed), None);
            out.push(json!({"id": id, "image": png_b64(&images.narrow(0, i, 1).reshape(&images.shape()[1..]))?}));
        }
        Ok(Value::Array(out))
    }

    pub fn resample(&self, body: &[u8]) -> ApiResult {
        let req: ResampleReq = parse(body)?;
        let parent = self.session(&req.id)?;
        let stack = self.stack()?;
        let cfg = &stack.cfg;
        let shape = [1, cfg.n, cfg.d];
        let codes = {
            let _g = dualgan::no_grad();
            match req.space.as_str() {
                "z" => {
                    let z: Tensor<f32> = dualgan::rng::normal(&mut stream(req.seed, "latent.z", 0), &shape);
                    MappedPair {
                        z_plus: stack.mappers.z.forward(&Var::constant(z))?.value().clone(),
                        p_plus: parent.codes.p_plus.clone(),
                    }
                }
                "p" => {
                    let p: Tensor<f32> = dualgan::rng::normal(&mut stream(req.seed, "latent.p", 0), &shape);
                    MappedPair {
                        z_plus: parent.codes.z_plus.clone(),
                        p_plus: stack.mappers.p.forward(&Var::constant(p))?.value().clone(),
                    }
                }
                other => {
                    return Err(ApiError::bad_request(format!(
                        "space must be \"z\" or \"p\", got {other:?}"
                    )))
                }
            }
        };
        let image = stack.render(&codes)?;
        let id = self.store(codes, format!("resample:{}:{}", req.space, req.seed), Some(req.id));
        Ok(json!({"id": id, "image": png_b64(&image.reshape(&image.shape()[1..]))?}))
    }

    pub fn edit(&self, body: &[u8]) -> ApiResult {
        let req: EditReq = parse(body)?;
        if req.steps == 0 || req.steps > MAX_STEPS {
            return Err(ApiError::bad_request(format!("steps must lie in 1..={MAX_STEPS}")));
        }
        if !req.lambda_z.is_finite() || !req.lambda_p.is_finite() {
            return Err(ApiError::bad_request("lambdas must be finite"));
        }
        let dirs = self
            .directions
            .as_ref()
            .ok_or_else(|| ApiError::unavailable("no directions loaded"))?;
        let dir = dirs.get(&req.attribute)?;
        let origin = self.session(&req.id)?;
        let stack = self.stack()?;
        let seq = edit_sequence(&origin.codes, dir, req.lambda_z, req.lambda_p, req.steps)?;
        let batch = MappedPair::concat(&seq);
        let images = stack.render(&batch)?;
        let mut out = Vec::with_capacity(seq.len());
        for (k, codes) in seq.into_iter().enumerate() {
            let source = format!(
                "edit:{}:{}:{}:{k}/{}",
                req.attribute, req.lambda_z, req.lambda_p, req.steps
            );
            let id = if k == 0 {
                req.id.clone()
            } else {
                self.store(codes, source, Some(req.id.clone()))
            };
            out.push(json!({"id": id, "image": png_b64(&images.narrow(0, k, 1).reshape(&images.shape()[1..]))?}));
        }
        Ok(Value::Array(out))
    }

    pub fn invert(&self, body: &[u8]) -> ApiResult {
        let encoder = self.encoder()?;
        let req: InvertReq = parse(body)?;
        let bytes = STANDARD
            .decode(req.image.trim())
            .map_err(|e| ApiError::bad_request(format!("image is not base64: {e}")))?;
        let image = decode_png(&bytes)?;
        let r = self.gan.config.resolution;
        if image.shape() != [3, r, r] {
            return Err(ApiError::bad_request(format!(
                "expected a {r}x{r} RGB image, got shape {:?}",
                image.shape()
            )));
        }
        let stack = self.stack()?;
        let codes = encoder.encode(&image.reshape(&[1, 3, r, r]))?;
        let recon = stack.render(&codes)?;
        let id = self.store(codes, format!("invert:{:016x}", hash_tensors(&[&image])), None);
        Ok(json!({"id": id, "reconstruction": png_b64(&recon.reshape(&[3, r, r]))?}))
    }

    /// Hash of the initial feature map of a stored latent.
    pub fn f0_hash(&self, id: &str) -> ApiResult {
        let s = self.session(id)?;
        let stack = self.stack()?;
        let f0 = stack.f0(&s.codes.p_plus)?;
        Ok(json!({"id": id, "f0hash": format!("{:016x}", hash_tensors(&[&f0]))}))
    }
}

async fn blocking(engine: Arc<Engine>, f: impl FnOnce(&Engine) -> ApiResult + Send + 'static) -> Response {
    match tokio::task::spawn_blocking(move || f(&engine)).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            error: "internal",
            detail: e.to_string(),
        }
        .into_response(),
    }
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route(
            "/health",
            get(|State(e): State<Arc<Engine>>| blocking(e, |e| e.health())),
        )
        .route(
            "/attributes",
            get(|State(e): State<Arc<Engine>>| blocking(e, |e| e.attributes())),
        )
        .route(
            "/sample",
            post(|State(e): State<Arc<Engine>>, b: Bytes| blocking(e, move |e| e.sample(&b))),
        )
        .route(
            "/resample",
            post(|State(e): State<Arc<Engine>>, b: Bytes| blocking(e, move |e| e.resample(&b))),
        )
        .route(
            "/edit",
            post(|State(e): State<Arc<Engine>>, b: Bytes| blocking(e, move |e| e.edit(&b))),
        )
        .route(
            "/invert",
            post(|State(e): State<Arc<Engine>>, b: Bytes| blocking(e, move |e| e.invert(&b))),
        )
        .route(
            "/debug/f0hash",
            get(|State(e): State<Arc<Engine>>, Query(q): Query<F0Query>| blocking(e, move |e| e.f0_hash(&q.id))),
        )
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .layer(CorsLayer::permissive())
        .with_state(engine)
}

/// Serves until the process is stopped.
pub async fn serve(engine: Engine, port: u16) -> std::io::Result<()> {
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(engine))).await
}

/// Blocking wrapper around [`serve`] with its own runtime.
pub fn run(engine: Engine, port: u16) -> std::io::Result<()> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(engine, port))
}
