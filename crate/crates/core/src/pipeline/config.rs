use serde::{Deserialize, Serialize};

use crate::fusion::FusionConfig;
use crate::language::{HttpClientConfig, PromptTemplates, RetryPolicy};
use crate::pairing::PairingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub kind: ClientKind,
    /// Mock client seed.
    pub seed: u64,
    pub http: HttpClientConfig,
    pub retry: RetryPolicy,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            kind: ClientKind::Mock,
            seed: 0,
            http: HttpClientConfig::default(),
            retry: RetryPolicy::default(),
        }
    }
}

/// Everything a run depends on besides its input files and the cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub pairing: PairingConfig,
    pub fusion: FusionConfig,
    pub templates: PromptTemplates,
    pub client: ClientConfig,
    /// Upper bound on concurrent client requests (and worker threads).
    pub max_inflight: usize,
    /// IoU for optional cross-pair NMS after fusion; `None` disables it.
    pub post_nms_iou: Option<f64>,
    /// Drop fused detections scoring below this before writing.
    pub score_threshold: Option<f64>,
    /// IoU threshold used when matching against ground truth.
    pub eval_iou: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pairing: PairingConfig::default(),
            fusion: FusionConfig::default(),
            templates: PromptTemplates::default(),
            client: ClientConfig::default(),
            max_inflight: 4,
            post_nms_iou: None,
            score_threshold: None,
            eval_iou: 0.5,
        }
    }
}
