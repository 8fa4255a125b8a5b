//! HTTP backend for OpenAI-compatible servers.
//!
//! Completions go to `POST {base}/chat/completions`. Continuation scoring
//! uses `POST {base}/completions` with `echo: true, max_tokens: 0,
//! logprobs: 1` on `prompt + continuation` and sums the token log-probs
//! whose character offset falls inside the continuation.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, Completion, DecodeConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_timeout() -> u64 {
    120
}

fn default_retries() -> u32 {
    3
}

pub struct HttpBackend {
    cfg: HttpConfig,
    agent: ureq::Agent,
}

enum Attempt {
    Done(Value),
    Retry(String),
    Fatal(Error),
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend { cfg, agent }
    }

    fn url(&self, route: &str) -> String {
        format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), route)
    }

    fn attempt(&self, url: &str, body: &Value) -> Attempt {
        let mut req = self.agent.post(url);
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                if status == 429 || status >= 500 {
                    return Attempt::Retry(format!("HTTP {status} from {url}"));
                }
                if status >= 400 {
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    return Attempt::Fatal(Error::Transport {
                        message: format!("HTTP {status} from {url}: {text}"),
                        retries: 0,
                    });
                }
                match resp.body_mut().read_json::<Value>() {
                    Ok(v) => Attempt::Done(v),
                    Err(e) => Attempt::Fatal(Error::Transport {
                        message: format!("malformed response from {url}: {e}"),
                        retries: 0,
                    }),
                }
            }
            Err(e) => Attempt::Retry(e.to_string()),
        }
    }

    fn post(&self, route: &str, body: &Value) -> Result<Value> {
        let url = self.url(route);
        let mut last = String::new();
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 * (1 << attempt.min(6))));
            }
            match self.attempt(&url, body) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => {
                    log::warn!("request to {url} failed (attempt {}): {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(Error::Transport {
            message: last,
            retries: self.cfg.retries,
        })
    }
}

fn malformed(what: &str) -> Error {
    Error::Transport {
        message: format!("response missing {what}"),
        retries: 0,
    }
}

impl Backend for HttpBackend {
    fn complete(&self, prompt: &str, cfg: &DecodeConfig) -> Result<Completion> {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": [{ "role": "user", "content": prompt }],
            "max_tokens": cfg.max_new_tokens,
            "temperature": cfg.temperature,
        });
        if !cfg.stop_sequences.is_empty() {
            body["stop"] = json!(cfg.stop_sequences);
        }
        let v = self.post("chat/completions", &body)?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| malformed("choices[0].message.content"))?
            .to_string();
        Ok(Completion {
            text,
            prompt_tokens: v["usage"]["prompt_tokens"].as_u64(),
            output_tokens: v["usage"]["completion_tokens"].as_u64(),
        })
    }

    fn continuation_logprobs(&self, prompt: &str, continuation: &str) -> Result<Vec<f64>> {
        let body = json!({
            "model": self.cfg.model,
            "prompt": format!("{prompt}{continuation}"),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
            "temperature": 0,
        });
        let v = self.post("completions", &body)?;
        let lp = &v["choices"][0]["logprobs"];
        let (Some(values), Some(offsets)) = (lp["token_logprobs"].as_array(), lp["text_offset"].as_array()) else {
            return Err(Error::Unsupported("continuation scoring (no echoed logprobs)".into()));
        };
        let start = prompt.chars().count() as u64;
        let mut out = Vec::new();
        for (value, offset) in values.iter().zip(offsets) {
            let offset = offset.as_u64().ok_or_else(|| malformed("integer text_offset"))?;
            if offset >= start {
                out.push(value.as_f64().ok_or_else(|| malformed("numeric token_logprobs"))?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves `responses` to successive requests, one connection each.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                counter.fetch_add(1, Ordering::SeqCst);
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (format!("http://{addr}/v1"), hits, handle)
    }

    fn backend(base_url: String, retries: u32) -> HttpBackend {
        HttpBackend::new(HttpConfig {
            base_url,
            model: "toy".into(),
            api_key: Some("k".into()),
            timeout_secs: 5,
            retries,
        })
    }

    #[test]
    fn server_error_surfaces_retry_count() {
        let (url, hits, handle) = serve(vec![(500, "{}".into()); 3]);
        let err = backend(url, 2).complete("p", &DecodeConfig::default()).unwrap_err();
        match err {
            Error::Transport { retries, message } => {
                assert_eq!(retries, 2);
                assert!(message.contains("500"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        handle.join().unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn chat_completion_parses_usage() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":" 12 #### 12"}}],"usage":{"prompt_tokens":57,"completion_tokens":4}}"#;
        let (url, _, handle) = serve(vec![(500, "{}".into()), (200, body.into())]);
        let c = backend(url, 1).complete("Question: x\nAnswer:", &DecodeConfig::default()).unwrap();
        assert_eq!(c.text, " 12 #### 12");
        assert_eq!(c.prompt_tokens, Some(57));
        let sent = handle.join().unwrap();
        let req: Value = serde_json::from_str(&sent[1]).unwrap();
        assert_eq!(req["model"], "toy");
        assert_eq!(req["messages"][0]["content"], "Question: x\nAnswer:");
        assert_eq!(req["temperature"], 0.0);
    }

    #[test]
    fn echoed_logprobs_are_sliced_at_continuation() {
        let body = r#"{"choices":[{"logprobs":{"tokens":["ab","c"," 4","2"],"token_logprobs":[null,-1.0,-2.0,-0.5],"text_offset":[0,2,3,5]}}]}"#;
        let (url, _, handle) = serve(vec![(200, body.into())]);
        let lps = backend(url, 0).continuation_logprobs("abc", " 42").unwrap();
        assert_eq!(lps, vec![-2.0, -0.5]);
        handle.join().unwrap();
    }

    #[test]
    fn missing_logprobs_is_unsupported() {
        let (url, _, handle) = serve(vec![(200, r#"{"choices":[{"text":""}]}"#.into())]);
        assert!(matches!(
            backend(url, 0).continuation_logprobs("a", "b"),
            Err(Error::Unsupported(_))
        ));
        handle.join().unwrap();
    }

    #[test]
    fn client_error_is_not_retried() {
        let (url, hits, handle) = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
        assert!(matches!(
            backend(url, 3).complete("p", &DecodeConfig::default()),
            Err(Error::Transport { retries: 0, .. })
        ));
        handle.join().unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }
}
