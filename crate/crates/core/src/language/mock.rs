//! Deterministic offline client.

use sha2::{Digest, Sha256};

use super::client::{ChatClient, ChatRequest, TransportError};

const SCENES: [&str; 6] = [
    "A pedestrian walking along the sidewalk is inside the green box",
    "A person standing near a parked car is inside the green box",
    "A figure carrying a bag crosses the street inside the green box",
    "A cyclist-sized warm shape is visible inside the green box",
    "A partially occluded person is inside the green box",
    "A tall upright silhouette is inside the green box",
];

const RATIONALES: [&str; 4] = [
    "Both descriptions agree on an upright human shape",
    "The RGB description is clearer than the thermal one",
    "The thermal description suggests a warm body while the RGB one is dim",
    "The descriptions partly disagree, so confidence is moderate",
];

/// Replies are pure functions of `(seed, request fingerprint)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockClient {
    seed: u64,
}

impl MockClient {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn digest(&self, request: &ChatRequest) -> [u8; 32] {
        let fp = request.fingerprint(&self.id());
        Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(fp.as_bytes())
            .finalize()
            .into()
    }
}

pub fn mock_client(seed: u64) -> MockClient {
    MockClient::new(seed)
}

/// Maps two digest bytes onto a two-decimal score in `[0.05, 0.99]`.
fn score(hi: u8, lo: u8) -> f64 {
    let n = u16::from_be_bytes([hi, lo]) % 95;
    (5 + n) as f64 / 100.0
}

impl ChatClient for MockClient {
    fn id(&self) -> String {
        format!("mock-v1/seed={}", self.seed)
    }

    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let d = self.digest(request);
        let reply = match request {
            ChatRequest::DescribeImage { .. } => format!(
                "{}. (ref {})",
                SCENES[d[0] as usize % SCENES.len()],
                hex::encode(&d[28..])
            ),
            ChatRequest::Complete { .. } => format!(
                "Rationale: {}. [person, {:.2}], [person, {:.2}]",
                RATIONALES[d[0] as usize % RATIONALES.len()],
                score(d[1], d[2]),
                score(d[3], d[4]),
            ),
        };
        Ok(reply)
    }
}
