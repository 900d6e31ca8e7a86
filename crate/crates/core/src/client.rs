//! Inference wire protocol and backends.
//!
//! The modulation sidecar speaks JSON over HTTP:
//!
//! - `GET  {endpoint}/capabilities` → [`Capabilities`]
//! - `POST {endpoint}/generate` with a [`GenerateRequest`] → [`GenerateResponse`]
//!
//! Hosted models are reached through an OpenAI-compatible chat-completions
//! adapter that supports baseline generation only; modulation and attention
//! requests are refused before any network traffic. [`ReplayClient`] and
//! [`RecordingClient`] capture and replay responses so whole runs can be
//! reproduced without a model.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attention::BackgroundMode;

pub const DEFAULT_MAX_NEW_TOKENS: u32 = 128;
pub const API_KEY_ENV: &str = "CC_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("server returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("capability not supported by {endpoint}: {feature}")]
    Unsupported { endpoint: String, feature: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no recorded response for request {0}")]
    ReplayMiss(String),
    #[error("fixture I/O: {0}")]
    Fixture(String),
}

impl ClientError {
    /// Transport failures, rate limits and server errors may succeed on retry.
    pub fn is_retriable(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    #[default]
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationSpec {
    pub alpha: f64,
    pub beta: f64,
    /// Row-major indices on the server's visual-token grid.
    pub target_indices: Vec<usize>,
    pub background_mode: BackgroundMode,
    pub layer_indices: Vec<usize>,
}

fn default_max_new_tokens() -> u32 {
    DEFAULT_MAX_NEW_TOKENS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    /// Base64-encoded image file. Absent for text-only judge queries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub prompt: String,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default)]
    pub decoding: Decoding,
    #[serde(default)]
    pub modulation: Option<ModulationSpec>,
    #[serde(default)]
    pub return_attention: bool,
    #[serde(default)]
    pub attention_token_set: Option<Vec<usize>>,
}

impl GenerateRequest {
    pub fn new(image: Option<String>, prompt: impl Into<String>) -> Self {
        Self {
            image,
            prompt: prompt.into(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            decoding: Decoding::Greedy,
            modulation: None,
            return_attention: false,
            attention_token_set: None,
        }
    }

    fn needs_sidecar(&self) -> Option<&'static str> {
        if self.modulation.is_some() {
            Some("modulation")
        } else if self.return_attention || self.attention_token_set.is_some() {
            Some("attention")
        } else {
            None
        }
    }

    /// Checks the request against the server's capabilities.
    pub fn validate(&self, caps: &Capabilities, endpoint: &str) -> Result<(), ClientError> {
        if self.max_new_tokens == 0 {
            return Err(ClientError::InvalidRequest("max_new_tokens must be at least 1".into()));
        }
        let unsupported = |feature: Feature| ClientError::Unsupported {
            endpoint: endpoint.to_string(),
            feature: feature.to_string(),
        };
        let grid_len = caps.grid_len();
        let check_indices = |what: &str, idx: &[usize]| -> Result<(), ClientError> {
            let Some(len) = grid_len else {
                return Err(ClientError::InvalidRequest(format!(
                    "{what} given but the server reports no token grid"
                )));
            };
            match idx.iter().find(|&&i| i >= len) {
                Some(i) => Err(ClientError::InvalidRequest(format!(
                    "{what} index {i} outside the {len}-token grid"
                ))),
                None => Ok(()),
            }
        };
        if let Some(m) = &self.modulation {
            if !caps.supports(Feature::Modulation) {
                return Err(unsupported(Feature::Modulation));
            }
            check_indices("target", &m.target_indices)?;
            if let Some(n) = caps.n_layers {
                if let Some(l) = m.layer_indices.iter().find(|&&l| l >= n) {
                    return Err(ClientError::InvalidRequest(format!(
                        "layer index {l} outside the {n}-layer model"
                    )));
                }
            }
        }
        if self.return_attention || self.attention_token_set.is_some() {
            if !caps.supports(Feature::Attention) {
                return Err(unsupported(Feature::Attention));
            }
            if let Some(set) = &self.attention_token_set {
                check_indices("attention token", set)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerAttention {
    pub mean_all_visual: f64,
    pub mean_selected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
    /// `[grid_w, grid_h]` of the visual tokens for this image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_grid: Option<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_layer_attention: Option<Vec<LayerAttention>>,
}

impl GenerateResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            token_grid: None,
            per_layer_attention: None,
        }
    }

    fn check(&self, req: &GenerateRequest, caps: &Capabilities) -> Result<(), ClientError> {
        if let Some(layers) = &self.per_layer_attention {
            let bad = layers.iter().position(|l| {
                !(0.0..=1.0).contains(&l.mean_all_visual) || !(0.0..=1.0).contains(&l.mean_selected)
            });
            if let Some(i) = bad {
                return Err(ClientError::Malformed(format!("layer {i} attention mean outside [0, 1]")));
            }
            if let Some(n) = caps.n_layers {
                if layers.len() != n {
                    return Err(ClientError::Malformed(format!(
                        "{} attention entries for a {n}-layer model",
                        layers.len()
                    )));
                }
            }
        } else if req.return_attention {
            return Err(ClientError::Malformed("attention requested but not returned".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Modulation,
    Attention,
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Feature::Modulation => "modulation",
            Feature::Attention => "attention",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    #[serde(default)]
    pub features: BTreeSet<Feature>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_w: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_h: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_layers: Option<usize>,
    /// How the server computes per-layer attention statistics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_definition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl Capabilities {
    pub fn supports(&self, feature: Feature) -> bool {
        self.features.contains(&feature)
    }

    pub fn grid(&self) -> Option<(u32, u32)> {
        Some((self.grid_w?, self.grid_h?))
    }

    fn grid_len(&self) -> Option<usize> {
        self.grid().map(|(w, h)| w as usize * h as usize)
    }
}

/// An inference backend. Implementations are shared across worker threads.
pub trait InferenceClient: Send + Sync {
    /// Human-readable endpoint description, safe to log.
    fn describe(&self) -> String;
    fn capabilities(&self) -> Result<Capabilities, ClientError>;
    fn generate(&self, request: &GenerateRequest) -> Result<GenerateResponse, ClientError>;
}

impl<C: InferenceClient + ?Sized> InferenceClient for Box<C> {
    fn describe(&self) -> String {
        (**self).describe()
    }
    fn capabilities(&self) -> Result<Capabilities, ClientError> {
        (**self).capabilities()
    }
    fn generate(&self, request: &GenerateRequest) -> Result<GenerateResponse, ClientError> {
        (**self).generate(request)
    }
}

/// Bounded exponential backoff for retriable errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
            multiplier: 2,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            initial_backoff: Duration::ZERO,
            multiplier: 2,
        }
    }

    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, ClientError>) -> Result<T, ClientError> {
        let mut delay = self.initial_backoff;
        let mut attempt = 1;
        loop {
            match op() {
                Err(e) if e.is_retriable() && attempt < self.max_attempts => {
                    log::warn!("attempt {attempt}/{} failed: {e}; retrying in {delay:?}", self.max_attempts);
                    std::thread::sleep(delay);
                    delay *= self.multiplier;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

pub fn encode_image(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn encode_image_file(path: &Path) -> std::io::Result<String> {
    Ok(encode_image(&std::fs::read(path)?))
}

fn http_client() -> Result<reqwest::blocking::Client, ClientError> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(600))
        .build()
        .map_err(|e| ClientError::Transport(e.to_string()))
}

fn read_json<T: serde::de::DeserializeOwned>(resp: reqwest::blocking::Response) -> Result<T, ClientError> {
    let status = resp.status();
    let body = resp.text().map_err(|e| ClientError::Transport(e.to_string()))?;
    if !status.is_success() {
        return Err(ClientError::Http {
            status: status.as_u16(),
            body: body.chars().take(500).collect(),
        });
    }
    serde_json::from_str(&body).map_err(|e| ClientError::Malformed(e.to_string()))
}

fn send(builder: reqwest::blocking::RequestBuilder, api_key: Option<&str>) -> Result<reqwest::blocking::Response, ClientError> {
    let builder = match api_key {
        Some(key) => builder.bearer_auth(key),
        None => builder,
    };
    builder.send().map_err(|e| ClientError::Transport(e.to_string()))
}

fn api_key_from_env() -> Option<String> {
    std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty())
}

/// Client for the modulation sidecar.
pub struct SidecarClient {
    endpoint: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    caps: OnceLock<Capabilities>,
}

impl fmt::Debug for SidecarClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SidecarClient")
            .field("endpoint", &self.endpoint)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl SidecarClient {
    /// Uses the `CC_API_KEY` environment variable for auth when set.
    pub fn new(endpoint: impl Into<String>) -> Result<Self, ClientError> {
        Ok(Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            api_key: api_key_from_env(),
            http: http_client()?,
            caps: OnceLock::new(),
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }
}

impl InferenceClient for SidecarClient {
    fn describe(&self) -> String {
        format!("sidecar {}", self.endpoint)
    }

    /// Probed once per client and cached.
    fn capabilities(&self) -> Result<Capabilities, ClientError> {
        if let Some(c) = self.caps.get() {
            return Ok(c.clone());
        }
        let url = format!("{}/capabilities", self.endpoint);
        let caps: Capabilities = read_json(send(self.http.get(url), self.api_key.as_deref())?)?;
        Ok(self.caps.get_or_init(|| caps).clone())
    }

    fn generate(&self, request: &GenerateRequest) -> Result<GenerateResponse, ClientError> {
        let caps = if request.needs_sidecar().is_some() {
            self.capabilities()?
        } else {
            self.caps.get().cloned().unwrap_or_default()
        };
        if request.needs_sidecar().is_some() || request.max_new_tokens == 0 {
            request.validate(&caps, &self.endpoint)?;
        }
        let url = format!("{}/generate", self.endpoint);
        let resp: GenerateResponse = read_json(send(self.http.post(url).json(request), self.api_key.as_deref())?)?;
        resp.check(request, &caps)?;
        Ok(resp)
    }
}

/// Baseline-only adapter for OpenAI-compatible chat-completions endpoints.
pub struct ChatClient {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChatClient")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl ChatClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Result<Self, ClientError> {
        Ok(Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key: api_key_from_env(),
            http: http_client()?,
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    fn body(&self, request: &GenerateRequest) -> serde_json::Value {
        let mut content = Vec::new();
        if let Some(image) = &request.image {
            let mime = base64::engine::general_purpose::STANDARD
                .decode(image.as_bytes())
                .ok()
                .and_then(|b| image::guess_format(&b).ok())
                .map_or("image/png", |f| f.to_mime_type());
            content.push(serde_json::json!({
                "type": "image_url",
                "image_url": { "url": format!("data:{mime};base64,{image}") }
            }));
        }
        content.push(serde_json::json!({ "type": "text", "text": request.prompt }));
        serde_json::json!({
            "model": self.model,
            "temperature": 0.0,
            "max_tokens": request.max_new_tokens,
            "messages": [{ "role": "user", "content": content }],
        })
    }
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

impl InferenceClient for ChatClient {
    fn describe(&self) -> String {
        format!("chat {} ({})", self.endpoint, self.model)
    }

    fn capabilities(&self) -> Result<Capabilities, ClientError> {
        Ok(Capabilities {
            model: Some(self.model.clone()),
            ..Capabilities::default()
        })
    }

    fn generate(&self, request: &GenerateRequest) -> Result<GenerateResponse, ClientError> {
        request.validate(&self.capabilities()?, &self.endpoint)?;
        let url = format!("{}/chat/completions", self.endpoint);
        let completion: ChatCompletion =
            read_json(send(self.http.post(url).json(&self.body(request)), self.api_key.as_deref())?)?;
        let text = completion
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ClientError::Malformed("completion has no message content".into()))?;
        Ok(GenerateResponse::text(text))
    }
}

/// Stable identity of a request: SHA-256 over its JSON form with the image
/// payload replaced by the image's own SHA-256.
pub fn request_key(request: &GenerateRequest) -> String {
    let mut keyed = request.clone();
    keyed.image = request
        .image
        .as_ref()
        .map(|img| hex::encode(Sha256::digest(img.as_bytes())));
    let json = serde_json::to_vec(&keyed).expect("request serializes");
    hex::encode(Sha256::digest(json))
}

/// One line of a record/replay fixture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FixtureEntry {
    Capabilities { capabilities: Capabilities },
    Generate { key: String, response: GenerateResponse },
}

/// Serves responses captured by a [`RecordingClient`].
#[derive(Debug)]
pub struct ReplayClient {
    path: PathBuf,
    caps: Capabilities,
    responses: HashMap<String, GenerateResponse>,
}

impl ReplayClient {
    pub fn open(path: &Path) -> Result<Self, ClientError> {
        let file = File::open(path).map_err(|e| ClientError::Fixture(format!("{}: {e}", path.display())))?;
        let mut caps = None;
        let mut responses = HashMap::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| ClientError::Fixture(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry = serde_json::from_str(&line)
                .map_err(|e| ClientError::Fixture(format!("{}:{}: {e}", path.display(), n + 1)))?;
            match entry {
                FixtureEntry::Capabilities { capabilities } => {
                    caps.get_or_insert(capabilities);
                }
                FixtureEntry::Generate { key, response } => {
                    responses.entry(key).or_insert(response);
                }
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            caps: caps.unwrap_or_default(),
            responses,
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl InferenceClient for ReplayClient {
    fn describe(&self) -> String {
        format!("replay {}", self.path.display())
    }

    fn capabilities(&self) -> Result<Capabilities, ClientError> {
        Ok(self.caps.clone())
    }

    fn generate(&self, request: &GenerateRequest) -> Result<GenerateResponse, ClientError> {
        request.validate(&self.caps, "replay fixture")?;
        let key = request_key(request);
        self.responses
            .get(&key)
            .cloned()
            .ok_or(ClientError::ReplayMiss(key))
    }
}

/// Forwards to an inner client and appends every successful exchange to a
/// fixture file.
pub struct RecordingClient<C> {
    inner: C,
    sink: Mutex<File>,
    caps_written: OnceLock<()>,
}

impl<C: InferenceClient> RecordingClient<C> {
    pub fn new(inner: C, path: &Path) -> Result<Self, ClientError> {
        let sink = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ClientError::Fixture(format!("{}: {e}", path.display())))?;
        Ok(Self {
            inner,
            sink: Mutex::new(sink),
            caps_written: OnceLock::new(),
        })
    }

    fn append(&self, entry: &FixtureEntry) -> Result<(), ClientError> {
        let mut line = serde_json::to_string(entry).expect("fixture entry serializes");
        line.push('\n');
        let mut sink = self.sink.lock().expect("fixture sink poisoned");
        sink.write_all(line.as_bytes())
            .and_then(|_| sink.flush())
            .map_err(|e| ClientError::Fixture(e.to_string()))
    }
}

impl<C: InferenceClient> InferenceClient for RecordingClient<C> {
    fn describe(&self) -> String {
        format!("recording {}", self.inner.describe())
    }

    fn capabilities(&self) -> Result<Capabilities, ClientError> {
        let caps = self.inner.capabilities()?;
        if self.caps_written.set(()).is_ok() {
            self.append(&FixtureEntry::Capabilities {
                capabilities: caps.clone(),
            })?;
        }
        Ok(caps)
    }

    fn generate(&self, request: &GenerateRequest) -> Result<GenerateResponse, ClientError> {
        let response = self.inner.generate(request)?;
        self.append(&FixtureEntry::Generate {
            key: request_key(request),
            response: response.clone(),
        })?;
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn sidecar_caps() -> Capabilities {
        Capabilities {
            features: [Feature::Modulation, Feature::Attention].into(),
            grid_w: Some(15),
            grid_h: Some(15),
            n_layers: Some(4),
            attention_definition: None,
            model: None,
        }
    }

    fn modulated() -> GenerateRequest {
        let mut r = GenerateRequest::new(Some(encode_image(b"img")), "How many?");
        r.modulation = Some(ModulationSpec {
            alpha: 1.5,
            beta: 0.0,
            target_indices: vec![0, 17, 224],
            background_mode: BackgroundMode::VisualOnly,
            layer_indices: vec![0, 1, 2, 3],
        });
        r
    }

    #[test]
    fn wire_round_trip() {
        let mut req = modulated();
        req.return_attention = true;
        req.attention_token_set = Some(vec![3, 4]);
        let json = serde_json::to_string(&req).unwrap();
        assert!(json.contains("\"background_mode\":\"visual_only\""));
        assert!(json.contains("\"decoding\":\"greedy\""));
        let back: GenerateRequest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, req);

        let resp = GenerateResponse {
            text: "The parrot has 3 legs".into(),
            token_grid: Some([15, 15]),
            per_layer_attention: Some(vec![LayerAttention {
                mean_all_visual: 0.01,
                mean_selected: 0.03,
            }]),
        };
        let back: GenerateResponse = serde_json::from_str(&serde_json::to_string(&resp).unwrap()).unwrap();
        assert_eq!(back, resp);
    }

    #[test]
    fn minimal_request_uses_defaults() {
        let req: GenerateRequest = serde_json::from_str(r#"{"prompt":"hi"}"#).unwrap();
        assert_eq!(req.max_new_tokens, 128);
        assert_eq!(req.decoding, Decoding::Greedy);
        assert!(req.modulation.is_none() && !req.return_attention);
    }

    #[test]
    fn validation_against_capabilities() {
        let caps = sidecar_caps();
        assert!(modulated().validate(&caps, "x").is_ok());

        let mut out_of_grid = modulated();
        out_of_grid.modulation.as_mut().unwrap().target_indices.push(225);
        assert!(matches!(out_of_grid.validate(&caps, "x"), Err(ClientError::InvalidRequest(_))));

        let mut bad_layer = modulated();
        bad_layer.modulation.as_mut().unwrap().layer_indices.push(4);
        assert!(bad_layer.validate(&caps, "x").is_err());

        let err = modulated().validate(&Capabilities::default(), "x").unwrap_err();
        assert!(matches!(err, ClientError::Unsupported { .. }));

        let mut zero = GenerateRequest::new(None, "q");
        zero.max_new_tokens = 0;
        assert!(zero.validate(&caps, "x").is_err());
    }

    #[test]
    fn chat_refuses_modulation_without_network() {
        // Unroutable endpoint: any network attempt would surface as a transport error.
        let chat = ChatClient::new("http://127.0.0.1:1", "m").unwrap();
        let err = chat.generate(&modulated()).unwrap_err();
        assert!(matches!(err, ClientError::Unsupported { .. }), "{err}");
        let mut attn = GenerateRequest::new(None, "q");
        attn.return_attention = true;
        assert!(matches!(chat.generate(&attn), Err(ClientError::Unsupported { .. })));
        assert!(chat.capabilities().unwrap().features.is_empty());
        assert!(chat.capabilities().unwrap().grid().is_none());
    }

    #[test]
    fn retry_policy() {
        let calls = AtomicU32::new(0);
        let r = RetryPolicy::no_delay(3).run(|| {
            calls.fetch_add(1, Ordering::SeqCst);
            Err::<(), _>(ClientError::Transport("down".into()))
        });
        assert!(r.is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 3);

        calls.store(0, Ordering::SeqCst);
        let r = RetryPolicy::no_delay(3).run(|| {
            if calls.fetch_add(1, Ordering::SeqCst) == 0 {
                Err(ClientError::Http { status: 503, body: String::new() })
            } else {
                Ok(7)
            }
        });
        assert_eq!(r, Ok(7));

        calls.store(0, Ordering::SeqCst);
        let r = RetryPolicy::no_delay(3).run(|| {
            calls.fetch_add(1, Ordering::SeqCst);
            Err::<(), _>(ClientError::Http { status: 400, body: String::new() })
        });
        assert!(r.is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn default_retry_policy() {
        let p = RetryPolicy::default();
        assert_eq!(p.max_attempts, 3);
        assert_eq!(p.initial_backoff, Duration::from_secs(1));
    }

    #[test]
    fn request_key_is_stable_and_sensitive() {
        let a = modulated();
        assert_eq!(request_key(&a), request_key(&a.clone()));
        let mut b = a.clone();
        b.prompt.push('!');
        assert_ne!(request_key(&a), request_key(&b));
        let mut c = a.clone();
        c.image = Some(encode_image(b"other"));
        assert_ne!(request_key(&a), request_key(&c));
    }

    #[test]
    fn debug_redacts_key() {
        let c = SidecarClient::new("http://localhost:9").unwrap().with_api_key(Some("sekrit".into()));
        assert!(!format!("{c:?}").contains("sekrit"));
    }
}
