//! HTTP backend speaking a two-endpoint JSON protocol.
//!
//! POST {endpoint}/generate  {"prompt", "n", "temperature", "seed", "max_tokens"}
//!   -> {"texts": ["...", ...]}
//! POST {endpoint}/yes_prob  {"prompt"}
//!   -> {"p_yes": 0.83}
//!
//! Transport failures and 5xx responses are retried with a short backoff;
//! 4xx responses are contract violations and fail immediately.

use std::time::Duration;

use serde::Deserialize;

use super::{GatewayError, GenRequest, LlmBackend};

pub struct HttpLlm {
    endpoint: String,
    retries: u32,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct GenerateResponse {
    texts: Vec<String>,
}

#[derive(Deserialize)]
struct YesProbResponse {
    p_yes: f64,
}

impl HttpLlm {
    pub fn new(endpoint: String, timeout_ms: u64, retries: u32) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            // Status handling stays in post_json so 4xx and 5xx can take
            // different retry paths.
            .http_status_as_error(false)
            .build()
            .new_agent();
        HttpLlm { endpoint: endpoint.trim_end_matches('/').to_string(), retries, agent }
    }

    fn post_json<T: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<T, GatewayError> {
        let url = format!("{}{}", self.endpoint, path);
        let mut last_err = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 * (1 << (attempt - 1)) as u64));
            }
            match self.agent.post(&url).send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp.body_mut().read_json::<T>().map_err(|e| {
                            GatewayError::Contract(format!("bad response body from {url}: {e}"))
                        });
                    }
                    if status.is_server_error() {
                        last_err = format!("{url} returned {status}");
                        continue;
                    }
                    return Err(GatewayError::Contract(format!("{url} returned {status}")));
                }
                Err(e) => {
                    last_err = format!("{url}: {e}");
                    continue;
                }
            }
        }
        Err(GatewayError::Transport(format!(
            "{last_err} (after {} attempts)",
            self.retries + 1
        )))
    }
}

impl LlmBackend for HttpLlm {
    fn id(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn generate(&self, req: &GenRequest) -> Result<Vec<String>, GatewayError> {
        let body = serde_json::json!({
            "prompt": req.rendered,
            "n": req.n,
            "temperature": req.temperature,
            "seed": req.seed,
            "max_tokens": req.max_tokens,
        });
        let resp: GenerateResponse = self.post_json("/generate", &body)?;
        Ok(resp.texts)
    }

    fn yes_probability(&self, rendered: &str) -> Result<f64, GatewayError> {
        let body = serde_json::json!({ "prompt": rendered });
        let resp: YesProbResponse = self.post_json("/yes_prob", &body)?;
        Ok(resp.p_yes)
    }
}
