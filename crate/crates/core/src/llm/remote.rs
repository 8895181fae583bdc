use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, ChatRequest, GatewayConfig, GatewayError, ResponseFormat, Result};

/// Status code and body of one HTTP exchange.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportReply {
    pub status: u16,
    pub body: String,
}

/// One POST of a JSON body. `Err` means the request never produced a status.
pub trait Transport: Send + Sync {
    fn post(&self, url: &str, bearer: &str, body: &Value) -> std::result::Result<TransportReply, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        UreqTransport {
            agent: ureq::Agent::new_with_config(config),
        }
    }
}

impl Transport for UreqTransport {
    fn post(&self, url: &str, bearer: &str, body: &Value) -> std::result::Result<TransportReply, String> {
        let mut req = self.agent.post(url);
        if !bearer.is_empty() {
            req = req.header("Authorization", &format!("Bearer {bearer}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(TransportReply { status, body })
    }
}

/// OpenAI-compatible chat and embedding endpoints plus a sentiment endpoint
/// that accepts `{model, input}` and answers `{"score": <0..1>}`.
pub struct RemoteBackend {
    base_url: String,
    api_key: String,
    model: String,
    embedding_model: String,
    sentiment_model: String,
    max_retries: u32,
    backoff: Duration,
    transport: Box<dyn Transport>,
}

impl RemoteBackend {
    pub fn new(config: &GatewayConfig, transport: Box<dyn Transport>) -> Self {
        RemoteBackend {
            base_url: config.base_url.trim_end_matches('/').to_string(),
            api_key: config.api_key.clone(),
            model: config.model_name.clone(),
            embedding_model: config.embedding_model.clone(),
            sentiment_model: config.sentiment_model.clone(),
            max_retries: config.max_retries,
            backoff: Duration::from_millis(config.retry_backoff_ms),
            transport,
        }
    }

    /// Retries transport errors, 429 and 5xx with exponential backoff.
    fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let url = format!("{}/{path}", self.base_url);
        let attempts = self.max_retries + 1;
        let mut last = GatewayError::Transport {
            attempts: 0,
            message: "no attempt made".into(),
        };
        for attempt in 1..=attempts {
            if attempt > 1 {
                std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt - 2));
            }
            match self.transport.post(&url, &self.api_key, body) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    return serde_json::from_str(&reply.body)
                        .map_err(|e| GatewayError::MalformedReply(format!("response body: {e}")));
                }
                Ok(reply) if reply.status == 429 || reply.status >= 500 => {
                    log::warn!("{url}: HTTP {} on attempt {attempt}/{attempts}", reply.status);
                    last = GatewayError::Status {
                        status: reply.status,
                        body: reply.body,
                    };
                }
                Ok(reply) => {
                    return Err(GatewayError::Status {
                        status: reply.status,
                        body: reply.body,
                    })
                }
                Err(message) => {
                    log::warn!("{url}: {message} on attempt {attempt}/{attempts}");
                    last = GatewayError::Transport { attempts: attempt, message };
                }
            }
        }
        Err(last)
    }
}

impl Backend for RemoteBackend {
    fn namespace(&self) -> String {
        format!("remote:{}", self.model)
    }

    fn chat(&self, request: &ChatRequest) -> Result<String> {
        let mut body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_payload},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if request.response_format == ResponseFormat::JsonObject {
            body["response_format"] = json!({"type": "json_object"});
        }
        let reply = self.post("chat/completions", &body)?;
        let text = reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .unwrap_or_default();
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyCompletion);
        }
        Ok(text.to_string())
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let reply = self.post("embeddings", &json!({"model": self.embedding_model, "input": texts}))?;
        let data = reply
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::MalformedReply("embeddings reply lacks data".into()))?;
        let mut out = Vec::with_capacity(data.len());
        for item in data {
            let v: Vec<f64> = item
                .get("embedding")
                .and_then(|e| serde_json::from_value(e.clone()).ok())
                .ok_or_else(|| GatewayError::MalformedReply("embedding entry lacks vector".into()))?;
            if let Some(first) = out.first().map(Vec::len) {
                if first != v.len() {
                    return Err(GatewayError::DimensionMismatch {
                        expected: first,
                        got: v.len(),
                    });
                }
            }
            out.push(v);
        }
        Ok(out)
    }

    fn sentiment(&self, text: &str) -> Result<f64> {
        let reply = self.post("sentiment", &json!({"model": self.sentiment_model, "input": text}))?;
        reply
            .get("score")
            .and_then(Value::as_f64)
            .ok_or_else(|| GatewayError::MalformedReply("sentiment reply lacks score".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    /// Replays a scripted sequence of replies and records each request.
    struct Scripted {
        replies: Mutex<Vec<std::result::Result<TransportReply, String>>>,
        seen: Mutex<Vec<(String, Value)>>,
    }

    impl Scripted {
        fn new(mut replies: Vec<std::result::Result<TransportReply, String>>) -> Self {
            replies.reverse();
            Scripted {
                replies: Mutex::new(replies),
                seen: Mutex::new(Vec::new()),
            }
        }
    }

    impl Transport for &'static Scripted {
        fn post(&self, url: &str, _bearer: &str, body: &Value) -> std::result::Result<TransportReply, String> {
            self.seen.lock().unwrap().push((url.to_string(), body.clone()));
            self.replies.lock().unwrap().pop().expect("script exhausted")
        }
    }

    fn ok(body: Value) -> std::result::Result<TransportReply, String> {
        Ok(TransportReply {
            status: 200,
            body: body.to_string(),
        })
    }

    fn status(code: u16) -> std::result::Result<TransportReply, String> {
        Ok(TransportReply {
            status: code,
            body: "slow down".into(),
        })
    }

    fn backend(script: Vec<std::result::Result<TransportReply, String>>, retries: u32) -> (RemoteBackend, &'static Scripted) {
        let s: &'static Scripted = Box::leak(Box::new(Scripted::new(script)));
        let config = GatewayConfig {
            base_url: "http://example.test/v1/".into(),
            max_retries: retries,
            retry_backoff_ms: 1,
            ..GatewayConfig::default()
        };
        (RemoteBackend::new(&config, Box::new(s)), s)
    }

    fn request() -> ChatRequest {
        ChatRequest {
            system_prompt: "s".into(),
            user_payload: "u".into(),
            temperature: 0.0,
            max_tokens: 10,
            response_format: ResponseFormat::JsonObject,
        }
    }

    #[test]
    fn rate_limit_then_success() {
        let (b, s) = backend(
            vec![status(429), ok(json!({"choices": [{"message": {"content": "{\"a\":1}"}}]}))],
            3,
        );
        assert_eq!(b.chat(&request()).unwrap(), "{\"a\":1}");
        let seen = s.seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert_eq!(seen[0].0, "http://example.test/v1/chat/completions");
        assert_eq!(seen[0].1["response_format"]["type"], "json_object");
        assert_eq!(seen[0].1["messages"][1]["content"], "u");
    }

    #[test]
    fn errors_carry_attempts_and_status() {
        let (b, _) = backend(vec![Err("refused".into()), Err("refused".into()), Err("refused".into())], 2);
        match b.chat(&request()) {
            Err(GatewayError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("{other:?}"),
        }
        let (b, s) = backend(vec![status(401)], 5);
        assert!(matches!(b.chat(&request()), Err(GatewayError::Status { status: 401, .. })));
        assert_eq!(s.seen.lock().unwrap().len(), 1);
        let (b, _) = backend(vec![ok(json!({"choices": [{"message": {"content": ""}}]}))], 0);
        assert!(matches!(b.chat(&request()), Err(GatewayError::EmptyCompletion)));
    }

    #[test]
    fn embeddings_and_sentiment_parse() {
        let (b, _) = backend(
            vec![ok(json!({"data": [{"embedding": [1.0, 0.0]}, {"embedding": [0.0, 2.0]}]}))],
            0,
        );
        assert_eq!(
            b.embed(&["a".into(), "b".into()]).unwrap(),
            vec![vec![1.0, 0.0], vec![0.0, 2.0]]
        );
        let (b, _) = backend(vec![ok(json!({"data": [{"embedding": [1.0]}, {"embedding": [0.0, 2.0]}]}))], 0);
        assert!(matches!(
            b.embed(&["a".into(), "b".into()]),
            Err(GatewayError::DimensionMismatch { expected: 1, got: 2 })
        ));
        let (b, s) = backend(vec![ok(json!({"score": 0.25}))], 0);
        assert_eq!(b.sentiment("meh").unwrap(), 0.25);
        assert_eq!(s.seen.lock().unwrap()[0].0, "http://example.test/v1/sentiment");
    }
}
