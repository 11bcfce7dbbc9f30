//! Language branch: per-pedestrian descriptions from a multimodal model and
//! two-step chain-of-thought scoring from a text model.

pub mod cache;
pub mod client;
pub mod http;
pub mod mock;
pub mod parse;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Detection, Modality};
use crate::pairing::{dpair, PairedDetection, PairingConfig, PairingError};
use crate::vcm::{vcm_batch, ImageBuffer, VcmError};

pub use cache::{CacheEntry, CacheStats, Cached, ResponseCache};
pub use client::{
    sha256_hex, CallCounts, ChatClient, ChatRequest, Endpoint, FnClient, Metered, RetryPolicy,
    Retrying, TransportError,
};
pub use http::{HttpChatClient, HttpClientConfig};
pub use mock::{mock_client, MockClient};
pub use parse::{parse_prediction, ParseError, Prediction};

pub const DEFAULT_P_RGB: &str = "In this RGB image, what is in the green box?";
pub const DEFAULT_P_T: &str = "In this thermal image, what is in the green box?";
pub const DEFAULT_P_SINGLE: &str = "First, predict what is in the RGB image based on d_RGB. \
And predict what is in the thermal image based on d_T. \
Please answer in the format : [class, prediction score]";
pub const DEFAULT_P_MULTI: &str = "Based on the descriptions and your answers, predict what is \
in these aligned RGB and thermal images. Please answer in the format: [class, prediction score]";
pub const REPAIR_PROMPT: &str = "Please answer only in the format: [class, prediction score]";

pub const PERSON: &str = "person";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplates {
    pub p_rgb: String,
    pub p_t: String,
    pub p_single: String,
    pub p_multi: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            p_rgb: DEFAULT_P_RGB.into(),
            p_t: DEFAULT_P_T.into(),
            p_single: DEFAULT_P_SINGLE.into(),
            p_multi: DEFAULT_P_MULTI.into(),
        }
    }
}

impl PromptTemplates {
    pub fn describe_prompt(&self, side: Modality) -> &str {
        match side {
            Modality::Rgb => &self.p_rgb,
            Modality::Thermal => &self.p_t,
        }
    }
}

/// Model-written description of one marked crop. An empty `text` is kept
/// as returned (typically a refusal) and rejected later by [`mscot`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub image_id: String,
    pub modality: Modality,
    pub pair_index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MSCoTScores {
    pub pair_index: usize,
    pub s_rgb_l: f64,
    pub s_t_l: f64,
    pub s_f_l: f64,
    pub c_rgb_l: String,
    pub c_t_l: String,
    pub c_f_l: String,
    pub rationale: String,
}

#[derive(Debug, Error)]
pub enum LanguageError {
    #[error(transparent)]
    Pairing(#[from] PairingError),
    #[error(transparent)]
    Crop(#[from] VcmError),
    #[error("pair {pair_index}: {endpoint:?} request failed: {source}")]
    Transport {
        pair_index: usize,
        endpoint: Endpoint,
        #[source]
        source: TransportError,
    },
    #[error("pair {pair_index}: step {step} reply unusable after repair: {raw:?}")]
    Parse {
        pair_index: usize,
        step: u8,
        raw: String,
    },
    #[error("pair {pair_index}: empty {modality} description")]
    EmptyDescription {
        pair_index: usize,
        modality: Modality,
    },
    #[error("descriptions do not line up: rgb pair {rgb}, thermal pair {thermal}")]
    Misaligned { rgb: usize, thermal: usize },
}

impl LanguageError {
    pub fn is_transport(&self) -> bool {
        matches!(self, LanguageError::Transport { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CpdgOutput {
    pub pairs: Vec<PairedDetection>,
    pub rgb: Vec<Description>,
    pub thermal: Vec<Description>,
}

/// Pairs detections, crops and marks every pair in both images, and asks
/// the client to describe each crop. Describe calls run on the current
/// rayon pool; results are ordered by pair index.
#[allow(clippy::too_many_arguments)]
pub fn cpdg<C: ChatClient + ?Sized>(
    image_rgb: &ImageBuffer,
    image_t: &ImageBuffer,
    dets_rgb: &[Detection],
    dets_t: &[Detection],
    templates: &PromptTemplates,
    client: &C,
    cfg: &PairingConfig,
) -> Result<CpdgOutput, LanguageError> {
    let pairs = dpair(dets_rgb, dets_t, cfg)?;
    if pairs.is_empty() {
        return Ok(CpdgOutput::default());
    }
    let image_id = pairs[0].image_id().to_owned();
    let crops_rgb = vcm_batch(image_rgb, &pairs, Modality::Rgb)?;
    let crops_t = vcm_batch(image_t, &pairs, Modality::Thermal)?;

    let jobs: Vec<_> = crops_rgb
        .iter()
        .map(|c| (Modality::Rgb, c))
        .chain(crops_t.iter().map(|c| (Modality::Thermal, c)))
        .collect();
    let replies: Vec<Result<Description, LanguageError>> = jobs
        .par_iter()
        .map(|(side, crop)| {
            client
                .describe_image(&crop.image, templates.describe_prompt(*side))
                .map(|text| Description {
                    image_id: image_id.clone(),
                    modality: *side,
                    pair_index: crop.pair_index,
                    text,
                })
                .map_err(|source| LanguageError::Transport {
                    pair_index: crop.pair_index,
                    endpoint: Endpoint::DescribeImage,
                    source,
                })
        })
        .collect();

    let mut descriptions = replies.into_iter().collect::<Result<Vec<_>, _>>()?;
    let thermal = descriptions.split_off(pairs.len());
    Ok(CpdgOutput {
        pairs,
        rgb: descriptions,
        thermal,
    })
}

pub fn single_modal_context(d_rgb: &Description, d_t: &Description) -> String {
    format!("d_RGB: {}\nd_T: {}", d_rgb.text, d_t.text)
}

pub fn multispectral_context(
    d_rgb: &Description,
    d_t: &Description,
    s_rgb: f64,
    s_t: f64,
) -> String {
    format!(
        "{}\ns_RGB: {s_rgb}\ns_T: {s_t}",
        single_modal_context(d_rgb, d_t)
    )
}

/// Sends one completion and parses at least `need` records, with a single
/// repair request when the first reply does not comply.
fn complete_records<C: ChatClient + ?Sized>(
    client: &C,
    context: &str,
    prompt: &str,
    need: usize,
    pair_index: usize,
    step: u8,
) -> Result<(Vec<Prediction>, String), LanguageError> {
    let transport = |source| LanguageError::Transport {
        pair_index,
        endpoint: Endpoint::Complete,
        source,
    };
    let reply = client.complete(context, prompt).map_err(transport)?;
    if let Ok(recs) = parse_prediction(&reply) {
        if recs.len() >= need {
            return Ok((recs, reply));
        }
    }
    log::debug!("pair {pair_index}: step {step} reply not in record format, asking again");
    let repair_context = format!("{context}\n\n{prompt}\n\nPrevious answer: {reply}");
    let retry = client
        .complete(&repair_context, REPAIR_PROMPT)
        .map_err(transport)?;
    match parse_prediction(&retry) {
        Ok(recs) if recs.len() >= need => Ok((recs, retry)),
        _ => Err(LanguageError::Parse {
            pair_index,
            step,
            raw: retry,
        }),
    }
}

/// Two-step chain-of-thought scoring of one pair.
///
/// Step one asks for an RGB and a thermal record (the first two records in
/// the reply). Step two adds the gated single-modal scores to the context
/// and asks for the fused record; the last record in that reply is taken,
/// since rationale text precedes the final answer. Any record whose class
/// is not `person` scores zero.
pub fn mscot<C: ChatClient + ?Sized>(
    d_rgb: &Description,
    d_t: &Description,
    templates: &PromptTemplates,
    client: &C,
) -> Result<MSCoTScores, LanguageError> {
    let pair_index = d_rgb.pair_index;
    if d_t.pair_index != pair_index {
        return Err(LanguageError::Misaligned {
            rgb: d_rgb.pair_index,
            thermal: d_t.pair_index,
        });
    }
    for d in [d_rgb, d_t] {
        if d.text.trim().is_empty() {
            return Err(LanguageError::EmptyDescription {
                pair_index,
                modality: d.modality,
            });
        }
    }

    let ctx = single_modal_context(d_rgb, d_t);
    let (single, _) = complete_records(client, &ctx, &templates.p_single, 2, pair_index, 1)?;
    let (rgb, t) = (&single[0], &single[1]);
    let (s_rgb_l, s_t_l) = (rgb.gated_score(), t.gated_score());

    let ctx = multispectral_context(d_rgb, d_t, s_rgb_l, s_t_l);
    let (multi, rationale) = complete_records(client, &ctx, &templates.p_multi, 1, pair_index, 2)?;
    let fused = multi.last().expect("at least one record");

    Ok(MSCoTScores {
        pair_index,
        s_rgb_l,
        s_t_l,
        s_f_l: fused.gated_score(),
        c_rgb_l: rgb.label.clone(),
        c_t_l: t.label.clone(),
        c_f_l: fused.label.clone(),
        rationale,
    })
}

/// Runs [`mscot`] for every pair on the current rayon pool. Results are
/// indexed by pair; failures stay per pair.
pub fn mscot_batch<C: ChatClient + ?Sized>(
    rgb: &[Description],
    thermal: &[Description],
    templates: &PromptTemplates,
    client: &C,
) -> Result<Vec<Result<MSCoTScores, LanguageError>>, LanguageError> {
    if rgb.len() != thermal.len() {
        return Err(LanguageError::Misaligned {
            rgb: rgb.len(),
            thermal: thermal.len(),
        });
    }
    Ok(rgb
        .par_iter()
        .zip(thermal.par_iter())
        .map(|(r, t)| mscot(r, t, templates, client))
        .collect())
}
