//! HTTP-backed implementations of the embedding, reasoning, and execution
//! contracts. All speak JSON over POST; the embedding and chat shapes follow
//! the common completions API layout.
//!
//! Credentials are resolved from the environment at construction and held
//! only in memory; `Debug` output and serialization never include them.

use std::fmt;
use std::time::Duration;

use expkb::pipeline::{
    ExecutionTrajectory, Executor, ExecutorError, FinishReason, Plan, Reasoner, ReasonerError,
    ReasonerRequest, ReasonerResponse, Role, TrajectoryStep,
};
use expkb::semantic::{DenseVector, EmbeddingError, EmbeddingProvider};
use serde::{Deserialize, Serialize};

use crate::config::EndpointConfig;

fn client(timeout_secs: u64) -> anyhow::Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(timeout_secs))
        .build()
        .map_err(anyhow::Error::from)
}

fn authorize(
    request: reqwest::blocking::RequestBuilder,
    api_key: &Option<String>,
) -> reqwest::blocking::RequestBuilder {
    match api_key {
        Some(key) => request.bearer_auth(key),
        None => request,
    }
}

/// Embedding provider backed by an HTTP endpoint.
pub struct HttpEmbedder {
    client: reqwest::blocking::Client,
    url: String,
    model: Option<String>,
    api_key: Option<String>,
    dim: usize,
    identity: String,
}

impl fmt::Debug for HttpEmbedder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpEmbedder")
            .field("url", &self.url)
            .field("model", &self.model)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: usize,
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(endpoint: &EndpointConfig) -> anyhow::Result<Self> {
        anyhow::ensure!(!endpoint.url.is_empty(), "embedding endpoint url is empty");
        let dim = endpoint
            .dim
            .ok_or_else(|| anyhow::anyhow!("embedding endpoint requires an explicit dim"))?;
        let identity = format!(
            "http-embedder/{}@{}",
            endpoint.model.as_deref().unwrap_or("default"),
            endpoint.url
        );
        Ok(HttpEmbedder {
            client: client(60)?,
            url: endpoint.url.clone(),
            model: endpoint.model.clone(),
            api_key: endpoint.api_key()?,
            dim,
            identity,
        })
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<DenseVector>, EmbeddingError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = EmbeddingRequest {
            model: self.model.as_deref(),
            input: texts,
        };
        let response = authorize(self.client.post(&self.url), &self.api_key)
            .json(&body)
            .send()
            .map_err(|e| EmbeddingError::Transport {
                message: e.to_string(),
            })?;
        let status = response.status();
        if !status.is_success() {
            return Err(EmbeddingError::Transport {
                message: format!("embedding endpoint answered {status}"),
            });
        }
        let parsed: EmbeddingResponse =
            response.json().map_err(|e| EmbeddingError::Contract {
                message: format!("malformed embedding response: {e}"),
            })?;
        if parsed.data.len() != texts.len() {
            return Err(EmbeddingError::Contract {
                message: format!(
                    "requested {} embeddings, endpoint returned {}",
                    texts.len(),
                    parsed.data.len()
                ),
            });
        }
        let mut data = parsed.data;
        data.sort_by_key(|d| d.index);
        data.into_iter()
            .map(|d| {
                if d.embedding.len() != self.dim {
                    return Err(EmbeddingError::Contract {
                        message: format!(
                            "expected dimension {}, endpoint returned {}",
                            self.dim,
                            d.embedding.len()
                        ),
                    });
                }
                Ok(DenseVector(d.embedding))
            })
            .collect()
    }
}

/// Reasoner backed by a chat-completions HTTP endpoint.
pub struct HttpReasoner {
    client: reqwest::blocking::Client,
    url: String,
    model: Option<String>,
    api_key: Option<String>,
    identity: String,
}

impl fmt::Debug for HttpReasoner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpReasoner")
            .field("url", &self.url)
            .field("model", &self.model)
            .finish_non_exhaustive()
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

impl HttpReasoner {
    pub fn new(endpoint: &EndpointConfig) -> anyhow::Result<Self> {
        anyhow::ensure!(!endpoint.url.is_empty(), "reasoner endpoint url is empty");
        let identity = format!(
            "http-reasoner/{}@{}",
            endpoint.model.as_deref().unwrap_or("default"),
            endpoint.url
        );
        Ok(HttpReasoner {
            client: client(120)?,
            url: endpoint.url.clone(),
            model: endpoint.model.clone(),
            api_key: endpoint.api_key()?,
            identity,
        })
    }
}

impl Reasoner for HttpReasoner {
    fn complete(&self, request: &ReasonerRequest) -> Result<ReasonerResponse, ReasonerError> {
        let messages = request
            .messages
            .iter()
            .map(|m| ChatMessage {
                role: match m.role {
                    Role::System => "system",
                    Role::User => "user",
                },
                content: &m.content,
            })
            .collect();
        let body = ChatRequest {
            model: self.model.as_deref(),
            messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let response = authorize(self.client.post(&self.url), &self.api_key)
            .json(&body)
            .send()
            .map_err(|e| ReasonerError::Transport {
                message: e.to_string(),
            })?;
        let status = response.status();
        if !status.is_success() {
            return Err(ReasonerError::Transport {
                message: format!("reasoner endpoint answered {status}"),
            });
        }
        let parsed: ChatResponse = response.json().map_err(|e| ReasonerError::Contract {
            message: format!("malformed chat response: {e}"),
        })?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ReasonerError::Contract {
                message: "chat response carries no choices".to_string(),
            })?;
        let finish = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("content_filter") | Some("refusal") => FinishReason::Refusal,
            _ => FinishReason::Stop,
        };
        Ok(ReasonerResponse {
            text: choice.message.content.unwrap_or_default(),
            finish,
        })
    }

    fn identity(&self) -> &str {
        &self.identity
    }
}

/// Executor backed by an HTTP endpoint that receives a plan and answers with
/// the executed trajectory.
pub struct HttpExecutor {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

impl fmt::Debug for HttpExecutor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpExecutor")
            .field("url", &self.url)
            .finish_non_exhaustive()
    }
}

#[derive(Serialize)]
struct ExecuteRequest<'a> {
    query: &'a str,
    plan: &'a Plan,
}

#[derive(Deserialize)]
struct ExecuteResponse {
    #[serde(default)]
    steps: Vec<TrajectoryStep>,
    #[serde(default)]
    final_answer: Option<String>,
    #[serde(default)]
    error: Option<String>,
}

impl HttpExecutor {
    pub fn new(endpoint: &EndpointConfig) -> anyhow::Result<Self> {
        anyhow::ensure!(!endpoint.url.is_empty(), "executor endpoint url is empty");
        Ok(HttpExecutor {
            client: client(600)?,
            url: endpoint.url.clone(),
            api_key: endpoint.api_key()?,
        })
    }
}

impl Executor for HttpExecutor {
    fn execute(&self, plan: &Plan, query: &str) -> Result<ExecutionTrajectory, ExecutorError> {
        let failed = |message: String| ExecutorError::Failed {
            partial: None,
            message,
        };
        let response = authorize(self.client.post(&self.url), &self.api_key)
            .json(&ExecuteRequest { query, plan })
            .send()
            .map_err(|e| failed(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(failed(format!("executor endpoint answered {status}")));
        }
        let parsed: ExecuteResponse = response
            .json()
            .map_err(|e| failed(format!("malformed executor response: {e}")))?;
        let trajectory = ExecutionTrajectory {
            steps: parsed.steps,
            final_answer: parsed.final_answer,
        };
        match parsed.error {
            None => Ok(trajectory),
            Some(message) => Err(ExecutorError::Failed {
                partial: (!trajectory.steps.is_empty()).then_some(trajectory),
                message,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn debug_output_never_leaks_credentials() {
        let endpoint = EndpointConfig {
            url: "http://localhost:9".to_string(),
            api_key_env: None,
            model: Some("m".to_string()),
            dim: Some(8),
        };
        let embedder = HttpEmbedder::new(&endpoint).unwrap();
        let mut embedder_with_key = HttpEmbedder::new(&endpoint).unwrap();
        embedder_with_key.api_key = Some("secret-token-value".to_string());
        for adapter in [&embedder, &embedder_with_key] {
            let rendered = format!("{adapter:?}");
            assert!(!rendered.contains("secret-token-value"));
            assert!(!rendered.contains("api_key"));
        }
        let reasoner = HttpReasoner::new(&endpoint).unwrap();
        assert!(!format!("{reasoner:?}").contains("api_key"));
    }

    #[test]
    fn embedder_requires_an_explicit_dimension() {
        let endpoint = EndpointConfig {
            url: "http://localhost:9".to_string(),
            api_key_env: None,
            model: None,
            dim: None,
        };
        assert!(HttpEmbedder::new(&endpoint).is_err());
    }

    #[test]
    fn unreachable_endpoints_surface_as_transport_failures() {
        // Port 9 (discard) is not listening in the sandbox; connection fails fast.
        let endpoint = EndpointConfig {
            url: "http://127.0.0.1:9/v1".to_string(),
            api_key_env: None,
            model: None,
            dim: Some(4),
        };
        let embedder = HttpEmbedder::new(&endpoint).unwrap();
        let err = embedder.embed_batch(&["x".to_string()]).unwrap_err();
        assert!(matches!(err, EmbeddingError::Transport { .. }));

        let reasoner = HttpReasoner::new(&endpoint).unwrap();
        let request = ReasonerRequest {
            messages: vec![],
            temperature: 1.0,
            max_tokens: 16,
        };
        assert!(matches!(
            reasoner.complete(&request),
            Err(ReasonerError::Transport { .. })
        ));

        let executor = HttpExecutor::new(&endpoint).unwrap();
        let outcome = executor.execute(&Plan { steps: vec![] }, "q");
        assert!(matches!(outcome, Err(ExecutorError::Failed { partial: None, .. })));
    }
}
