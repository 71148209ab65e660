//! Cached, replayable chat-completion client.
//!
//! Every response is stored as `<cache_dir>/<prompt_hash>.json`. Lookups go
//! to the cache first; offline clients never touch the network.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("offline and no cached response for prompt {0}")]
    OfflineCacheMiss(String),
    #[error("credential variable {0} is not set")]
    CredentialMissing(String),
    #[error("provider request failed after {attempts} attempt(s): {message}")]
    Provider { attempts: u32, message: String },
    #[error("unexpected provider response: {0}")]
    BadResponse(String),
    #[error("cache error at {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("invalid provider config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProviderKind {
    /// `/chat/completions` style APIs (DeepSeek, OpenAI and compatibles).
    #[serde(rename = "openai")]
    OpenAiCompatible,
    /// Google `generateContent`.
    #[serde(rename = "gemini")]
    Gemini,
}

impl ProviderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProviderKind::OpenAiCompatible => "openai",
            ProviderKind::Gemini => "gemini",
        }
    }
}

fn default_temperature() -> f64 {
    0.0
}
fn default_max_tokens() -> u32 {
    1024
}
fn default_timeout() -> u64 {
    120
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}
fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub provider: ProviderKind,
    pub model: String,
    /// Full request URL. For Gemini a `{model}` placeholder is substituted.
    pub endpoint: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_concurrency")]
    pub max_concurrent: usize,
}

impl ProviderConfig {
    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| ClientError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&raw)
            .map_err(|e| ClientError::Config(format!("{}: {e}", path.display())))?;
        if cfg.max_attempts == 0 || cfg.max_concurrent == 0 {
            return Err(ClientError::Config(
                "max_attempts and max_concurrent must be >= 1".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn model_id(&self) -> String {
        format!("{}:{}", self.provider.as_str(), self.model)
    }
}

/// One provider answer, as cached on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawResponse {
    pub provider: String,
    pub model: String,
    pub prompt_hash: String,
    pub text: String,
    pub timestamp: String,
    #[serde(default)]
    pub from_cache: bool,
}

/// Cache key: SHA-256 over provider, model, template digest and prompt.
pub fn prompt_hash(provider: &str, model: &str, template_digest: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    for part in [provider, model, template_digest, prompt] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.json"))
    }

    pub fn get(&self, hash: &str) -> Result<Option<RawResponse>, ClientError> {
        let path = self.entry_path(hash);
        let raw = match fs::read_to_string(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => {
                return Err(ClientError::Cache {
                    path,
                    message: e.to_string(),
                })
            }
        };
        let mut resp: RawResponse = serde_json::from_str(&raw).map_err(|e| ClientError::Cache {
            path: path.clone(),
            message: e.to_string(),
        })?;
        resp.from_cache = true;
        Ok(Some(resp))
    }

    /// Writes an entry atomically (temp file in the same directory, then rename).
    pub fn put(&self, resp: &RawResponse) -> Result<(), ClientError> {
        let cache_err = |path: &Path, e: &dyn std::fmt::Display| ClientError::Cache {
            path: path.to_owned(),
            message: e.to_string(),
        };
        fs::create_dir_all(&self.dir).map_err(|e| cache_err(&self.dir, &e))?;
        let path = self.entry_path(&resp.prompt_hash);
        let stored = RawResponse {
            from_cache: false,
            ..resp.clone()
        };
        let mut body = serde_json::to_string_pretty(&stored).map_err(|e| cache_err(&path, &e))?;
        body.push('\n');
        let mut tmp =
            tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| cache_err(&self.dir, &e))?;
        tmp.write_all(body.as_bytes())
            .map_err(|e| cache_err(&path, &e))?;
        tmp.persist(&path).map_err(|e| cache_err(&path, &e.error))?;
        Ok(())
    }
}

/// Counting semaphore bounding in-flight requests.
struct Permits {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub requests: u64,
    pub cache_hits: u64,
    pub retries: u64,
    pub total_ms: u64,
    pub max_ms: u64,
}

impl LatencyStats {
    pub fn mean_ms(&self) -> f64 {
        if self.requests == 0 {
            0.0
        } else {
            self.total_ms as f64 / self.requests as f64
        }
    }
}

enum Attempt {
    Retryable(String),
    Fatal(ClientError),
}

pub struct LlmClient {
    cfg: ProviderConfig,
    cache: ResponseCache,
    offline: bool,
    template_digest: String,
    http: Option<reqwest::blocking::Client>,
    permits: Permits,
    stats: Mutex<LatencyStats>,
}

impl LlmClient {
    pub fn new(
        cfg: ProviderConfig,
        cache: ResponseCache,
        template_digest: impl Into<String>,
        offline: bool,
    ) -> Result<Self, ClientError> {
        let http = if offline {
            None
        } else {
            Some(
                reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs(cfg.timeout_secs))
                    .build()
                    .map_err(|e| ClientError::Config(e.to_string()))?,
            )
        };
        let permits = Permits::new(cfg.max_concurrent.max(1));
        Ok(Self {
            cfg,
            cache,
            offline,
            template_digest: template_digest.into(),
            http,
            permits,
            stats: Mutex::new(LatencyStats::default()),
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.cfg
    }

    pub fn stats(&self) -> LatencyStats {
        *self.stats.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn hash_for(&self, prompt: &str) -> String {
        prompt_hash(
            self.cfg.provider.as_str(),
            &self.cfg.model,
            &self.template_digest,
            prompt,
        )
    }

    /// Returns the cached response for `prompt`, or queries the provider and
    /// caches the answer.
    pub fn query(&self, prompt: &str) -> Result<RawResponse, ClientError> {
        let hash = self.hash_for(prompt);
        if let Some(hit) = self.cache.get(&hash)? {
            self.stats
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .cache_hits += 1;
            return Ok(hit);
        }
        let Some(http) = self.http.as_ref().filter(|_| !self.offline) else {
            return Err(ClientError::OfflineCacheMiss(hash));
        };
        let key = std::env::var(&self.cfg.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| ClientError::CredentialMissing(self.cfg.api_key_env.clone()))?;

        let _permit = self.permits.acquire();
        let started = Instant::now();
        let mut attempts = 0;
        let text = loop {
            attempts += 1;
            match self.send(http, &key, prompt) {
                Ok(text) => break text,
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(message)) => {
                    if attempts >= self.cfg.max_attempts {
                        return Err(ClientError::Provider { attempts, message });
                    }
                    tracing::warn!(attempt = attempts, %message, "provider request failed, retrying");
                    self.stats.lock().unwrap_or_else(|e| e.into_inner()).retries += 1;
                    thread::sleep(Duration::from_millis(
                        self.cfg.backoff_ms.saturating_mul(1 << (attempts - 1)),
                    ));
                }
            }
        };
        let elapsed = started.elapsed().as_millis() as u64;
        {
            let mut s = self.stats.lock().unwrap_or_else(|e| e.into_inner());
            s.requests += 1;
            s.total_ms += elapsed;
            s.max_ms = s.max_ms.max(elapsed);
        }

        let resp = RawResponse {
            provider: self.cfg.provider.as_str().to_owned(),
            model: self.cfg.model.clone(),
            prompt_hash: hash,
            text,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            from_cache: false,
        };
        self.cache.put(&resp)?;
        Ok(resp)
    }

    fn send(
        &self,
        http: &reqwest::blocking::Client,
        key: &str,
        prompt: &str,
    ) -> Result<String, Attempt> {
        let request = match self.cfg.provider {
            ProviderKind::OpenAiCompatible => {
                http.post(&self.cfg.endpoint).bearer_auth(key).json(&json!({
                    "model": self.cfg.model,
                    "messages": [{"role": "user", "content": prompt}],
                    "temperature": self.cfg.temperature,
                    "max_tokens": self.cfg.max_tokens,
                    "stream": false,
                }))
            }
            ProviderKind::Gemini => http
                .post(self.cfg.endpoint.replace("{model}", &self.cfg.model))
                .header("x-goog-api-key", key)
                .json(&json!({
                    "contents": [{"role": "user", "parts": [{"text": prompt}]}],
                    "generationConfig": {
                        "temperature": self.cfg.temperature,
                        "maxOutputTokens": self.cfg.max_tokens,
                    },
                })),
        };
        let resp = request
            .send()
            .map_err(|e| Attempt::Retryable(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| Attempt::Retryable(e.to_string()))?;
        if status.is_server_error() {
            return Err(Attempt::Retryable(format!(
                "HTTP {status}: {}",
                truncate(&body)
            )));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(ClientError::Provider {
                attempts: 1,
                message: format!("HTTP {status}: {}", truncate(&body)),
            }));
        }
        let value: Value = serde_json::from_str(&body)
            .map_err(|e| Attempt::Fatal(ClientError::BadResponse(e.to_string())))?;
        extract_text(self.cfg.provider, &value)
            .ok_or_else(|| Attempt::Fatal(ClientError::BadResponse(truncate(&body))))
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(300).collect()
}

/// Pulls the generated text out of a provider's response body.
pub(crate) fn extract_text(kind: ProviderKind, v: &Value) -> Option<String> {
    match kind {
        ProviderKind::OpenAiCompatible => v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned),
        ProviderKind::Gemini => {
            let parts = v["candidates"][0]["content"]["parts"].as_array()?;
            let text: String = parts.iter().filter_map(|p| p["text"].as_str()).collect();
            Some(text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves the given (status, body) pairs, one per connection.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        thread::spawn(move || {
            for (status, body) in replies {
                let Ok((mut stream, _)) = listener.accept() else {
                    return;
                };
                counter.fetch_add(1, Ordering::SeqCst);
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1/chat/completions"), hits)
    }

    fn config(endpoint: String, key_env: &str) -> ProviderConfig {
        ProviderConfig {
            provider: ProviderKind::OpenAiCompatible,
            model: "test-model".into(),
            endpoint,
            api_key_env: key_env.into(),
            temperature: 0.0,
            max_tokens: 64,
            timeout_secs: 10,
            max_attempts: 3,
            backoff_ms: 1,
            max_concurrent: 2,
        }
    }

    fn chat_body(text: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
    }

    #[test]
    fn hash_depends_on_every_part() {
        let h = prompt_hash("openai", "m", "t", "p");
        assert_eq!(h, prompt_hash("openai", "m", "t", "p"));
        assert_ne!(h, prompt_hash("openai", "m2", "t", "p"));
        assert_ne!(h, prompt_hash("openai", "m", "t2", "p"));
        assert_ne!(h, prompt_hash("gemini", "m", "t", "p"));
        assert_ne!(
            prompt_hash("a", "bc", "t", "p"),
            prompt_hash("ab", "c", "t", "p")
        );
    }

    #[test]
    fn offline_miss_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let client = LlmClient::new(
            config("http://127.0.0.1:9/".into(), "QQA_UNUSED"),
            ResponseCache::new(dir.path()),
            "t",
            true,
        )
        .unwrap();
        assert!(matches!(
            client.query("p"),
            Err(ClientError::OfflineCacheMiss(_))
        ));
    }

    #[test]
    fn missing_credential() {
        let dir = tempfile::tempdir().unwrap();
        let client = LlmClient::new(
            config("http://127.0.0.1:9/".into(), "QQA_TEST_DEFINITELY_UNSET"),
            ResponseCache::new(dir.path()),
            "t",
            false,
        )
        .unwrap();
        assert!(matches!(
            client.query("p"),
            Err(ClientError::CredentialMissing(_))
        ));
    }

    #[test]
    fn retries_then_caches() {
        std::env::set_var("QQA_TEST_KEY_RETRY", "secret");
        let (url, hits) = serve(vec![(503, "{}".into()), (200, chat_body("\"الجواب\""))]);
        let dir = tempfile::tempdir().unwrap();
        let client = LlmClient::new(
            config(url, "QQA_TEST_KEY_RETRY"),
            ResponseCache::new(dir.path()),
            "t",
            false,
        )
        .unwrap();
        let first = client.query("سؤال").unwrap();
        assert!(!first.from_cache);
        assert_eq!(first.text, "\"الجواب\"");
        assert_eq!(hits.load(Ordering::SeqCst), 2);
        assert_eq!(client.stats().retries, 1);

        let second = client.query("سؤال").unwrap();
        assert!(second.from_cache);
        assert_eq!(second.text, first.text);
        assert_eq!(hits.load(Ordering::SeqCst), 2);
        assert!(client.cache.entry_path(&first.prompt_hash).exists());
    }

    #[test]
    fn client_errors_are_not_retried() {
        std::env::set_var("QQA_TEST_KEY_400", "secret");
        let (url, hits) = serve(vec![
            (400, "{\"error\":\"bad\"}".into()),
            (200, chat_body("x")),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let client = LlmClient::new(
            config(url, "QQA_TEST_KEY_400"),
            ResponseCache::new(dir.path()),
            "t",
            false,
        )
        .unwrap();
        assert!(matches!(
            client.query("p"),
            Err(ClientError::Provider { .. })
        ));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn gives_up_after_max_attempts() {
        std::env::set_var("QQA_TEST_KEY_500", "secret");
        let (url, hits) = serve(vec![(500, "{}".into()); 3]);
        let dir = tempfile::tempdir().unwrap();
        let client = LlmClient::new(
            config(url, "QQA_TEST_KEY_500"),
            ResponseCache::new(dir.path()),
            "t",
            false,
        )
        .unwrap();
        assert!(matches!(
            client.query("p"),
            Err(ClientError::Provider { attempts: 3, .. })
        ));
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn extracts_provider_text() {
        let gem = json!({"candidates": [{"content": {"parts": [{"text": "\"a\"\n"}, {"text": "\"b\""}]}}]});
        assert_eq!(
            extract_text(ProviderKind::Gemini, &gem).unwrap(),
            "\"a\"\n\"b\""
        );
        let oai: Value = serde_json::from_str(&chat_body("hi")).unwrap();
        assert_eq!(
            extract_text(ProviderKind::OpenAiCompatible, &oai).unwrap(),
            "hi"
        );
        assert!(extract_text(ProviderKind::OpenAiCompatible, &json!({})).is_none());
    }

    #[test]
    fn config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.toml");
        fs::write(
            &path,
            "provider = \"gemini\"\nmodel = \"gemini-1.5-pro\"\nendpoint = \"https://example.invalid/{model}\"\napi_key_env = \"GEMINI_API_KEY\"\n",
        )
        .unwrap();
        let cfg = ProviderConfig::load(&path).unwrap();
        assert_eq!(cfg.provider, ProviderKind::Gemini);
        assert_eq!(cfg.max_attempts, 3);
        assert_eq!(cfg.model_id(), "gemini:gemini-1.5-pro");
    }
}
