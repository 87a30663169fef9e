//! Chat-completion backend over HTTP(S).

use std::fmt;
use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, GatewayConfig, GatewayError, Request, TransportError};

pub struct RemoteBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    seed: u64,
    token: String,
}

impl fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("token", &"<redacted>")
            .finish()
    }
}

impl RemoteBackend {
    /// Reads the API token from the environment variable named in `cfg`.
    pub fn from_config(cfg: &GatewayConfig) -> Result<Self, GatewayError> {
        let token = std::env::var(&cfg.token_env).map_err(|_| {
            GatewayError::Config(format!(
                "remote backend: environment variable {} is not set",
                cfg.token_env
            ))
        })?;
        Ok(Self::new(cfg, token))
    }

    pub fn new(cfg: &GatewayConfig, token: String) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteBackend {
            agent,
            endpoint: cfg.endpoint.clone(),
            model: cfg.model.clone(),
            seed: cfg.seed,
            token,
        }
    }
}

fn classify(err: ureq::Error) -> TransportError {
    match err {
        ureq::Error::Timeout(_)
        | ureq::Error::Io(_)
        | ureq::Error::ConnectionFailed
        | ureq::Error::HostNotFound => TransportError::Transient(err.to_string()),
        other => TransportError::Fatal(other.to_string()),
    }
}

impl Backend for RemoteBackend {
    fn send(&self, req: &Request<'_>) -> Result<String, TransportError> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "seed": self.seed,
            "messages": [
                {"role": "system", "content": req.template.role},
                {"role": "user", "content": req.prompt},
            ],
        });
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.token))
            .send_json(&body)
            .map_err(classify)?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => {}
            429 => return Err(TransportError::RateLimited(format!("HTTP {status}"))),
            500..=599 => return Err(TransportError::Transient(format!("HTTP {status}"))),
            _ => return Err(TransportError::Fatal(format!("HTTP {status}"))),
        }
        let v: Value = resp.body_mut().read_json().map_err(classify)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| TransportError::Fatal("response lacks choices[0].message.content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{bindings, Gateway, RetryPolicy, TemplateSet};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves one canned HTTP response per accepted connection.
    fn serve(responses: Vec<Option<(u16, String)>>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let mut held = Vec::new();
            for resp in responses {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut body = vec![0; len];
                let _ = reader.read_exact(&mut body);
                let mut stream = stream;
                match resp {
                    Some((code, body)) => {
                        let _ = write!(
                            stream,
                            "HTTP/1.1 {code} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                            body.len()
                        );
                    }
                    None => held.push(stream),
                }
            }
            std::thread::sleep(Duration::from_secs(2));
        });
        format!("http://{addr}/v1/chat/completions")
    }

    fn gateway(endpoint: String, retries: u32, timeout_ms: u64) -> Gateway {
        let cfg = GatewayConfig {
            endpoint,
            timeout_ms,
            ..Default::default()
        };
        Gateway::new(
            Box::new(RemoteBackend::new(&cfg, "sk-secret-value".into())),
            TemplateSet::defaults(),
            2,
            RetryPolicy {
                max_retries: retries,
                backoff_base: Duration::ZERO,
            },
        )
    }

    fn probe_bindings() -> crate::gateway::Bindings {
        bindings([("image_id", "1".into()), ("question", "Is it?".into())])
    }

    #[test]
    fn server_error_is_retried() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"yes"}}]}"#.to_string();
        let url = serve(vec![Some((503, "{}".into())), Some((200, ok))]);
        let gw = gateway(url, 2, 5_000);
        assert_eq!(gw.complete("probe", &probe_bindings()).unwrap(), "yes");
        assert_eq!(gw.stats().retries, 1);
    }

    #[test]
    fn client_error_is_fatal() {
        let url = serve(vec![Some((400, "{}".into()))]);
        let gw = gateway(url, 3, 5_000);
        let err = gw.complete("probe", &probe_bindings()).unwrap_err();
        assert!(matches!(err, GatewayError::Fatal { .. }));
        assert!(!err.to_string().contains("sk-secret-value"));
    }

    #[test]
    fn timeout_beyond_retries() {
        let url = serve(vec![None, None]);
        let gw = gateway(url, 1, 200);
        match gw.complete("probe", &probe_bindings()) {
            Err(GatewayError::Exhausted { attempts, .. }) => assert_eq!(attempts, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn token_is_not_printed() {
        let b = RemoteBackend::new(&GatewayConfig::default(), "sk-secret-value".into());
        assert!(!format!("{b:?}").contains("sk-secret-value"));
    }

    #[test]
    fn missing_token_env_is_a_config_error() {
        let cfg = GatewayConfig {
            backend: super::super::BackendKind::Remote,
            token_env: "HALLOC_TEST_SURELY_UNSET_VAR".into(),
            ..Default::default()
        };
        assert!(matches!(
            Gateway::remote(&cfg, TemplateSet::defaults()),
            Err(GatewayError::Config(_))
        ));
    }
}
