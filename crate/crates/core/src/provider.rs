//! Scoring backends: text embeddings and image-text similarity.
//!
//! [`HttpProvider`] talks to a model server over JSON; [`MockProvider`]
//! answers from a fixture table so everything runs offline.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Condvar, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("provider broke its contract: {0}")]
    Contract(String),
    #[error("bad mock fixture: {0}")]
    Fixture(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub embedding_dim: usize,
    /// Longest text, in characters, accepted for image-text scoring.
    pub max_text_len: usize,
    pub supports_image_text: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageTextPair {
    /// Image locator or base64 payload.
    pub image: String,
    pub text: String,
}

/// Backend supplying embeddings and image-text similarities.
///
/// Implementations return raw responses; count, dimension and range checks
/// live in [`crate::consistency`].
pub trait ScoringProvider: Send + Sync {
    fn capabilities(&self) -> Result<Capabilities, ProviderError>;
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
    fn score_image_text(&self, pairs: &[ImageTextPair]) -> Result<Vec<f64>, ProviderError>;
}

// ---------------------------------------------------------------------------
// Wire protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub pairs: Vec<ImageTextPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CapabilitiesRequest {}

pub const CAPABILITIES_PATH: &str = "capabilities";
pub const EMBED_PATH: &str = "embed_texts";
pub const SCORE_PATH: &str = "score_image_text";
pub const HEALTH_PATH: &str = "health";

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *p == 0 {
            p = self.cv.wait(p).unwrap_or_else(|e| e.into_inner());
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Client for a model server speaking the JSON provider protocol:
/// `POST {base}/capabilities`, `POST {base}/embed_texts`,
/// `POST {base}/score_image_text`, plus `GET {base}/health`.
pub struct HttpProvider {
    base: String,
    client: reqwest::blocking::Client,
    in_flight: Semaphore,
    caps: OnceLock<Capabilities>,
}

impl HttpProvider {
    pub fn new(
        endpoint: &str,
        max_in_flight: usize,
        timeout: Duration,
    ) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Unavailable(e.to_string()))?;
        Ok(HttpProvider {
            base: endpoint.trim_end_matches('/').to_string(),
            client,
            in_flight: Semaphore::new(max_in_flight),
            caps: OnceLock::new(),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base, path)
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, ProviderError> {
        let _permit = self.in_flight.acquire();
        let resp = self
            .client
            .post(self.url(path))
            .json(body)
            .send()
            .map_err(|e| ProviderError::Unavailable(format!("{path}: {e}")))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| ProviderError::Unavailable(format!("{path}: {e}")))?;
        if !status.is_success() {
            return Err(ProviderError::Unavailable(format!(
                "{path}: HTTP {status}: {text}"
            )));
        }
        serde_json::from_str(&text)
            .map_err(|e| ProviderError::Contract(format!("{path}: malformed response: {e}")))
    }

    pub fn health(&self) -> Result<(), ProviderError> {
        let _permit = self.in_flight.acquire();
        let resp = self
            .client
            .get(self.url(HEALTH_PATH))
            .send()
            .map_err(|e| ProviderError::Unavailable(e.to_string()))?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(ProviderError::Unavailable(format!(
                "health: HTTP {}",
                resp.status()
            )))
        }
    }
}

impl ScoringProvider for HttpProvider {
    fn capabilities(&self) -> Result<Capabilities, ProviderError> {
        if let Some(c) = self.caps.get() {
            return Ok(*c);
        }
        let c: Capabilities = self.post(CAPABILITIES_PATH, &CapabilitiesRequest::default())?;
        Ok(*self.caps.get_or_init(|| c))
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let resp: EmbedResponse = self.post(
            EMBED_PATH,
            &EmbedRequest {
                texts: texts.to_vec(),
            },
        )?;
        if let Some(v) = resp.vectors.iter().find(|v| v.len() != resp.dim) {
            return Err(ProviderError::Contract(format!(
                "response declares dim {} but carries a vector of length {}",
                resp.dim,
                v.len()
            )));
        }
        Ok(resp.vectors)
    }

    fn score_image_text(&self, pairs: &[ImageTextPair]) -> Result<Vec<f64>, ProviderError> {
        let resp: ScoreResponse = self.post(
            SCORE_PATH,
            &ScoreRequest {
                pairs: pairs.to_vec(),
            },
        )?;
        Ok(resp.scores)
    }
}

// ---------------------------------------------------------------------------
// Mock provider
// ---------------------------------------------------------------------------

/// Dimension used by fixture-free mocks.
pub const DEFAULT_MOCK_DIM: usize = 64;
const DEFAULT_MOCK_TEXT_LEN: usize = 10_000;

/// What the mock does with a key missing from its tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFallback {
    /// Every text maps to the same unit vector; every pair scores 1.
    Uniform,
    /// Bag-of-words feature hashing for texts; a hash-derived score in
    /// [-1, 1] for pairs.
    Hashed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub image: String,
    pub text: String,
    pub score: f64,
}

/// On-disk mock table. Only `text_vectors` and `pair_scores` are required.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockFixture {
    #[serde(default)]
    pub text_vectors: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub pair_scores: Vec<PairScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_text_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supports_image_text: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<MockFallback>,
}

/// Deterministic provider backed by exact-match lookup tables.
#[derive(Debug, Clone)]
pub struct MockProvider {
    caps: Capabilities,
    texts: HashMap<String, Vec<f64>>,
    pairs: HashMap<(String, String), f64>,
    fallback: Option<MockFallback>,
}

impl MockProvider {
    pub fn from_fixture(fixture: MockFixture) -> Result<Self, ProviderError> {
        let dim = fixture
            .embedding_dim
            .or_else(|| fixture.text_vectors.values().next().map(Vec::len))
            .unwrap_or(DEFAULT_MOCK_DIM);
        if dim == 0 {
            return Err(ProviderError::Fixture(
                "embedding_dim must be positive".into(),
            ));
        }
        if let Some((k, v)) = fixture.text_vectors.iter().find(|(_, v)| v.len() != dim) {
            return Err(ProviderError::Fixture(format!(
                "vector for {k:?} has length {}, expected {dim}",
                v.len()
            )));
        }
        let mut pairs = HashMap::new();
        for p in fixture.pair_scores {
            pairs.insert((p.image, p.text), p.score);
        }
        Ok(MockProvider {
            caps: Capabilities {
                embedding_dim: dim,
                max_text_len: fixture.max_text_len.unwrap_or(DEFAULT_MOCK_TEXT_LEN),
                supports_image_text: fixture.supports_image_text.unwrap_or(true),
            },
            texts: fixture.text_vectors.into_iter().collect(),
            pairs,
            fallback: fixture.fallback,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, ProviderError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Fixture(format!("{}: {e}", path.display())))?;
        let fixture: MockFixture = serde_json::from_str(&raw)
            .map_err(|e| ProviderError::Fixture(format!("{}: {e}", path.display())))?;
        MockProvider::from_fixture(fixture)
    }

    /// Every similarity is 1.
    pub fn uniform() -> Self {
        MockProvider::with_fallback(MockFallback::Uniform)
    }

    pub fn hashed() -> Self {
        MockProvider::with_fallback(MockFallback::Hashed)
    }

    fn with_fallback(fallback: MockFallback) -> Self {
        MockProvider::from_fixture(MockFixture {
            fallback: Some(fallback),
            ..MockFixture::default()
        })
        .expect("empty fixture is valid")
    }

    fn fallback_vector(&self, text: &str) -> Option<Vec<f64>> {
        let dim = self.caps.embedding_dim;
        match self.fallback? {
            MockFallback::Uniform => {
                let mut v = vec![0.0; dim];
                v[0] = 1.0;
                Some(v)
            }
            MockFallback::Hashed => {
                let mut v = vec![0.0; dim];
                for w in text.split_whitespace() {
                    let h = fnv1a(w.to_lowercase().as_bytes());
                    v[(h % dim as u64) as usize] += 1.0;
                }
                Some(v)
            }
        }
    }

    fn fallback_score(&self, pair: &ImageTextPair) -> Option<f64> {
        match self.fallback? {
            MockFallback::Uniform => Some(1.0),
            MockFallback::Hashed => {
                let mut key = pair.image.as_bytes().to_vec();
                key.push(0);
                key.extend_from_slice(pair.text.as_bytes());
                Some((fnv1a(&key) % 20_001) as f64 / 10_000.0 - 1.0)
            }
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl ScoringProvider for MockProvider {
    fn capabilities(&self) -> Result<Capabilities, ProviderError> {
        Ok(self.caps)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        texts
            .iter()
            .map(|t| {
                self.texts
                    .get(t)
                    .cloned()
                    .or_else(|| self.fallback_vector(t))
                    .ok_or_else(|| ProviderError::Contract(format!("mock has no vector for {t:?}")))
            })
            .collect()
    }

    fn score_image_text(&self, pairs: &[ImageTextPair]) -> Result<Vec<f64>, ProviderError> {
        pairs
            .iter()
            .map(|p| {
                self.pairs
                    .get(&(p.image.clone(), p.text.clone()))
                    .copied()
                    .or_else(|| self.fallback_score(p))
                    .ok_or_else(|| {
                        ProviderError::Contract(format!(
                            "mock has no score for ({:?}, {:?})",
                            p.image, p.text
                        ))
                    })
            })
            .collect()
    }
}
