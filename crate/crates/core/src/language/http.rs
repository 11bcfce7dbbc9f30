//! OpenAI-style chat-completion client over HTTPS.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::client::{ChatClient, ChatRequest, TransportError};

pub const API_KEY_ENV: &str = "MSFUSE_API_KEY";
pub const ENDPOINT_ENV: &str = "MSFUSE_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpClientConfig {
    pub endpoint: String,
    /// Model used for image descriptions.
    pub vision_model: String,
    /// Model used for text completions.
    pub text_model: String,
    /// JSON pointer to the assistant text inside the reply.
    pub reply_path: String,
    pub timeout_secs: u64,
}

impl Default for HttpClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            vision_model: "gpt-4o".into(),
            text_model: "gpt-3.5-turbo".into(),
            reply_path: "/choices/0/message/content".into(),
            timeout_secs: 120,
        }
    }
}

pub struct HttpChatClient {
    cfg: HttpClientConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(cfg: HttpClientConfig, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            cfg,
            api_key,
            agent,
        }
    }

    /// Reads the key from `MSFUSE_API_KEY`; `MSFUSE_ENDPOINT` overrides the
    /// configured endpoint when set.
    pub fn from_env(mut cfg: HttpClientConfig) -> Self {
        if let Ok(ep) = std::env::var(ENDPOINT_ENV) {
            if !ep.is_empty() {
                cfg.endpoint = ep;
            }
        }
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(cfg, key)
    }

    pub fn config(&self) -> &HttpClientConfig {
        &self.cfg
    }

    /// The JSON body sent for `request`.
    pub fn request_body(&self, request: &ChatRequest) -> Result<Value, TransportError> {
        Ok(match request {
            ChatRequest::DescribeImage { image, prompt } => {
                let png = image
                    .to_png_bytes()
                    .map_err(|e| TransportError::Decode(format!("png encode: {e}")))?;
                json!({
                    "model": self.cfg.vision_model,
                    "messages": [{
                        "role": "user",
                        "content": [
                            {"type": "text", "text": prompt},
                            {"type": "image_url", "image_url": {
                                "url": format!("data:image/png;base64,{}", STANDARD.encode(png))
                            }}
                        ]
                    }]
                })
            }
            ChatRequest::Complete { context, prompt } => json!({
                "model": self.cfg.text_model,
                "messages": [{"role": "user", "content": format!("{context}\n\n{prompt}")}]
            }),
        })
    }

    pub fn extract_reply(&self, body: &str) -> Result<String, TransportError> {
        let v: Value = serde_json::from_str(body)
            .map_err(|e| TransportError::Decode(format!("reply is not JSON: {e}")))?;
        v.pointer(&self.cfg.reply_path)
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| TransportError::Decode(format!("no string at {}", self.cfg.reply_path)))
    }
}

impl ChatClient for HttpChatClient {
    fn id(&self) -> String {
        format!(
            "http/{}#{}+{}",
            self.cfg.endpoint, self.cfg.vision_model, self.cfg.text_model
        )
    }

    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let key = self
            .api_key
            .as_deref()
            .ok_or(TransportError::MissingCredentials(API_KEY_ENV))?;
        let body = self.request_body(request)?;
        let mut resp = self
            .agent
            .post(&self.cfg.endpoint)
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(&body)
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(TransportError::Status { status, body: text });
        }
        self.extract_reply(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vcm::ImageBuffer;

    fn client() -> HttpChatClient {
        HttpChatClient::new(HttpClientConfig::default(), Some("k".into()))
    }

    #[test]
    fn completion_body_shape() {
        let body = client()
            .request_body(&ChatRequest::Complete {
                context: "ctx".into(),
                prompt: "p".into(),
            })
            .unwrap();
        assert_eq!(body["model"], "gpt-3.5-turbo");
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "ctx\n\np");
    }

    #[test]
    fn image_body_is_inline_png() {
        let img = ImageBuffer::filled(2, 2, [0, 255, 0]).unwrap();
        let body = client()
            .request_body(&ChatRequest::DescribeImage {
                image: img.clone(),
                prompt: "what?".into(),
            })
            .unwrap();
        let url = body["messages"][0]["content"][1]["image_url"]["url"]
            .as_str()
            .unwrap();
        let b64 = url.strip_prefix("data:image/png;base64,").unwrap();
        let back = ImageBuffer::from_png_bytes(&STANDARD.decode(b64).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn reply_path_configurable() {
        let c = client();
        let body = r#"{"choices":[{"message":{"content":"[person, 0.5]"}}]}"#;
        assert_eq!(c.extract_reply(body).unwrap(), "[person, 0.5]");
        assert!(c.extract_reply("{}").is_err());

        let custom = HttpChatClient::new(
            HttpClientConfig {
                reply_path: "/output/text".into(),
                ..Default::default()
            },
            None,
        );
        assert_eq!(
            custom.extract_reply(r#"{"output":{"text":"hi"}}"#).unwrap(),
            "hi"
        );
    }

    #[test]
    fn missing_key_is_typed() {
        let c = HttpChatClient::new(HttpClientConfig::default(), None);
        let err = c.complete("a", "b").unwrap_err();
        assert_eq!(err, TransportError::MissingCredentials(API_KEY_ENV));
        assert!(!err.is_retryable());
    }
}
