//! End-to-end runs: loading inputs, the language stage, fusion, evaluation,
//! ablation, and run manifests.

pub mod config;
pub mod io;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ClientConfig, ClientKind, PipelineConfig};
pub use io::{
    load_config, load_detections, load_fused, load_ground_truth, load_language, save_detections,
    save_fused, save_language, to_canonical_json, write_json, DetectionFile, FusedOutput,
    GroundTruthFile, ImageLanguage, LanguageFile, ManifestEntry, PairFailure, SCHEMA_VERSION,
};

use crate::evaluation::{evaluate, EvalError, EvalReport, ImageInfo, Slice};
use crate::fusion::{fuse_image, post_fusion_nms, FusedDetection, FusionConfig, FusionError};
use crate::geometry::{Detection, Modality};
use crate::language::{
    cpdg, mock_client, mscot_batch, sha256_hex, CacheStats, Cached, CallCounts, ChatClient,
    ChatRequest, FnClient, HttpChatClient, LanguageError, Metered, PromptTemplates, ResponseCache,
    RetryPolicy, Retrying, TransportError,
};
use crate::pairing::{PairingConfig, PairingError};
use crate::vcm::{ImageBuffer, VcmError};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: entry {index}: {field}: {message}")]
    Entry {
        path: PathBuf,
        index: usize,
        field: &'static str,
        message: String,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: VcmError,
    },
    #[error("image {image_id}: {source}")]
    Language {
        image_id: String,
        #[source]
        source: LanguageError,
    },
    #[error(transparent)]
    Pairing(#[from] PairingError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl PipelineError {
    /// Process exit code: 3 when the language client failed after
    /// retries, 2 for anything wrong with the inputs or files.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Language { source, .. } if source.is_transport() => 3,
            _ => 2,
        }
    }
}

type ClientChain = Cached<Retrying<Metered<Box<dyn ChatClient>>>>;

/// The client as the pipeline sees it: cache in front of retries in front
/// of a call counter. Only requests that miss the cache are counted.
pub struct ClientStack {
    chain: ClientChain,
}

impl ClientStack {
    pub fn new(client: Box<dyn ChatClient>, retry: RetryPolicy, cache: ResponseCache) -> Self {
        Self {
            chain: Cached::new(Retrying::new(Metered::new(client), retry), cache),
        }
    }

    pub fn from_config(
        cfg: &ClientConfig,
        cache_dir: Option<&Path>,
    ) -> Result<Self, PipelineError> {
        let client: Box<dyn ChatClient> = match cfg.kind {
            ClientKind::Mock => Box::new(mock_client(cfg.seed)),
            ClientKind::Http => Box::new(HttpChatClient::from_env(cfg.http.clone())),
        };
        Ok(Self::new(client, cfg.retry, open_cache(cache_dir)?))
    }

    /// A client that can only answer from the cache, identifying itself as
    /// `client_id` so fingerprints line up with the recorded run.
    pub fn offline(client_id: &str, cache_dir: Option<&Path>) -> Result<Self, PipelineError> {
        let client = FnClient::new(client_id, |req: &ChatRequest| {
            Err(TransportError::NotCached(format!("{:?}", req.endpoint())))
        });
        Ok(Self::new(
            Box::new(client),
            RetryPolicy {
                max_retries: 0,
                ..RetryPolicy::default()
            },
            open_cache(cache_dir)?,
        ))
    }

    pub fn client(&self) -> &dyn ChatClient {
        &self.chain
    }

    pub fn id(&self) -> String {
        self.chain.id()
    }

    pub fn calls(&self) -> CallCounts {
        self.chain.inner().inner().counts()
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.chain.stats()
    }

    pub fn cache_dir(&self) -> Option<PathBuf> {
        self.chain.store().dir().map(Path::to_path_buf)
    }
}

fn open_cache(dir: Option<&Path>) -> Result<ResponseCache, PipelineError> {
    match dir {
        Some(d) => ResponseCache::open(d).map_err(|source| PipelineError::Io {
            path: d.to_owned(),
            source,
        }),
        None => Ok(ResponseCache::in_memory()),
    }
}

/// Both detection lists grouped by image, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineInputs {
    pub images_root: PathBuf,
    pub images: Vec<ImageInputs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageInputs {
    pub entry: ManifestEntry,
    pub rgb: Vec<Detection>,
    pub thermal: Vec<Detection>,
}

impl PipelineInputs {
    pub fn manifest(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.images.iter().map(|i| &i.entry)
    }

    pub fn image_infos(&self) -> Vec<ImageInfo> {
        self.manifest().map(ManifestEntry::image_info).collect()
    }

    pub fn num_detections(&self) -> usize {
        self.images
            .iter()
            .map(|i| i.rgb.len() + i.thermal.len())
            .sum()
    }
}

fn merge_manifests(
    path_t: &Path,
    mut merged: Vec<ManifestEntry>,
    other: Vec<ManifestEntry>,
) -> Result<Vec<ManifestEntry>, PipelineError> {
    let mut index: HashMap<String, usize> = merged
        .iter()
        .enumerate()
        .map(|(i, m)| (m.image_id.clone(), i))
        .collect();
    for m in other {
        match index.get(&m.image_id) {
            Some(&i) if merged[i] != m => {
                return Err(PipelineError::Schema {
                    path: path_t.to_owned(),
                    message: format!(
                        "manifest entry for {:?} disagrees with the RGB file",
                        m.image_id
                    ),
                })
            }
            Some(_) => {}
            None => {
                index.insert(m.image_id.clone(), merged.len());
                merged.push(m);
            }
        }
    }
    Ok(merged)
}

pub fn load_inputs(
    det_rgb_path: &Path,
    det_t_path: &Path,
    images_root: &Path,
) -> Result<PipelineInputs, PipelineError> {
    let rgb = load_detections(det_rgb_path)?;
    let thermal = load_detections(det_t_path)?;
    for (path, file, want) in [
        (det_rgb_path, &rgb, Modality::Rgb),
        (det_t_path, &thermal, Modality::Thermal),
    ] {
        if file.modality != want {
            return Err(PipelineError::Schema {
                path: path.to_owned(),
                message: format!(
                    "expected modality {}, found {}",
                    want.as_str(),
                    file.modality.as_str()
                ),
            });
        }
    }
    let manifest = merge_manifests(det_t_path, rgb.manifest, thermal.manifest)?;

    let mut images: Vec<ImageInputs> = manifest
        .into_iter()
        .map(|entry| ImageInputs {
            entry,
            rgb: Vec::new(),
            thermal: Vec::new(),
        })
        .collect();
    let slot: HashMap<String, usize> = images
        .iter()
        .enumerate()
        .map(|(i, m)| (m.entry.image_id.clone(), i))
        .collect();
    for d in rgb.detections {
        images[slot[&d.image_id]].rgb.push(d);
    }
    for d in thermal.detections {
        images[slot[&d.image_id]].thermal.push(d);
    }
    Ok(PipelineInputs {
        images_root: images_root.to_owned(),
        images,
    })
}

fn load_image(root: &Path, rel: &str) -> Result<ImageBuffer, PipelineError> {
    let path = io::resolve(root, rel);
    ImageBuffer::open(&path).map_err(|source| PipelineError::Image { path, source })
}

fn build_pool(max_inflight: usize) -> Result<rayon::ThreadPool, PipelineError> {
    if max_inflight == 0 {
        return Err(PipelineError::Config(
            "max_inflight must be at least 1".into(),
        ));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(max_inflight)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))
}

/// Pairs, crops and describes every image. Scores are left empty.
fn describe_image(
    image: &ImageInputs,
    root: &Path,
    pairing: &PairingConfig,
    templates: &PromptTemplates,
    client: &dyn ChatClient,
) -> Result<ImageLanguage, PipelineError> {
    let image_id = image.entry.image_id.clone();
    if image.rgb.is_empty() && image.thermal.is_empty() {
        return Ok(ImageLanguage {
            image_id,
            ..ImageLanguage::default()
        });
    }
    let img_rgb = load_image(root, &image.entry.path_rgb)?;
    let img_t = load_image(root, &image.entry.path_thermal)?;
    let out = cpdg(
        &img_rgb,
        &img_t,
        &image.rgb,
        &image.thermal,
        templates,
        client,
        pairing,
    )
    .map_err(|source| PipelineError::Language {
        image_id: image_id.clone(),
        source,
    })?;
    Ok(ImageLanguage {
        image_id,
        pairs: out.pairs,
        descriptions_rgb: out.rgb,
        descriptions_thermal: out.thermal,
        scores: Vec::new(),
        failures: Vec::new(),
    })
}

/// Runs the two-step scoring for every pair of one image. Parse failures
/// and empty descriptions become a vision-only fallback for that pair;
/// transport failures abort.
fn score_image(
    lang: &mut ImageLanguage,
    templates: &PromptTemplates,
    client: &dyn ChatClient,
) -> Result<(), PipelineError> {
    let wrap = |source| PipelineError::Language {
        image_id: lang.image_id.clone(),
        source,
    };
    let results = mscot_batch(
        &lang.descriptions_rgb,
        &lang.descriptions_thermal,
        templates,
        client,
    )
    .map_err(wrap)?;
    let mut scores = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (pair_index, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => scores.push(Some(s)),
            Err(e) if e.is_transport() => return Err(wrap(e)),
            Err(e) => {
                log::warn!(
                    "image {}: {e}; using vision-only fusion for this pair",
                    lang.image_id
                );
                failures.push(PairFailure {
                    pair_index,
                    error: e.to_string(),
                });
                scores.push(None);
            }
        }
    }
    lang.scores = scores;
    lang.failures = failures;
    Ok(())
}

pub fn describe_stage(
    inputs: &PipelineInputs,
    config: &PipelineConfig,
    client: &dyn ChatClient,
) -> Result<Vec<ImageLanguage>, PipelineError> {
    config.pairing.validate()?;
    let pool = build_pool(config.max_inflight)?;
    pool.install(|| {
        inputs
            .images
            .par_iter()
            .map(|img| {
                describe_image(
                    img,
                    &inputs.images_root,
                    &config.pairing,
                    &config.templates,
                    client,
                )
            })
            .collect()
    })
}

pub fn score_stage(
    langs: &mut [ImageLanguage],
    config: &PipelineConfig,
    client: &dyn ChatClient,
) -> Result<(), PipelineError> {
    let pool = build_pool(config.max_inflight)?;
    pool.install(|| {
        langs
            .par_iter_mut()
            .try_for_each(|l| score_image(l, &config.templates, client))
    })
}

/// Describe then score: the whole language branch.
pub fn run_language_stage(
    inputs: &PipelineInputs,
    config: &PipelineConfig,
    client: &dyn ChatClient,
) -> Result<Vec<ImageLanguage>, PipelineError> {
    let mut langs = describe_stage(inputs, config, client)?;
    score_stage(&mut langs, config, client)?;
    Ok(langs)
}

/// Fuses every image with `fusion`, then applies the optional NMS and
/// score threshold. Images whose scores were never computed fuse
/// vision-only.
pub fn fuse_stage(
    langs: &[ImageLanguage],
    fusion: &FusionConfig,
    post_nms_iou: Option<f64>,
    score_threshold: Option<f64>,
) -> Result<Vec<FusedDetection>, PipelineError> {
    let mut out = Vec::new();
    for l in langs {
        let scores = if l.scores.is_empty() {
            vec![None; l.pairs.len()]
        } else {
            l.scores.clone()
        };
        let mut fused = fuse_image(&l.pairs, &scores, fusion)?;
        if let Some(thr) = post_nms_iou {
            fused = post_fusion_nms(&fused, thr);
        }
        if let Some(min) = score_threshold {
            fused.retain(|d| d.score >= min);
        }
        out.extend(fused);
    }
    Ok(out)
}

/// Image conditions from the detection manifest, extended with any images
/// only the ground truth knows about.
pub fn eval_images(manifest: &[ImageInfo], gt: &GroundTruthFile) -> Vec<ImageInfo> {
    let mut images = manifest.to_vec();
    let mut known: std::collections::HashSet<String> =
        images.iter().map(|i| i.image_id.clone()).collect();
    let derived = crate::evaluation::images_from_ground_truth(&gt.annotations);
    for info in gt.images.iter().chain(derived.iter()) {
        if known.insert(info.image_id.clone()) {
            images.push(info.clone());
        }
    }
    images
}

pub fn evaluate_all<D: crate::evaluation::Scored>(
    dets: &[D],
    gt: &GroundTruthFile,
    images: &[ImageInfo],
    iou_thr: f64,
) -> Result<EvalReport, PipelineError> {
    Ok(evaluate(
        dets,
        &gt.annotations,
        images,
        &[Slice::Day, Slice::Night, Slice::All],
        iou_thr,
    )?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

fn digest_file(path: &Path) -> Result<FileDigest, PipelineError> {
    let bytes = fs::read(path).map_err(|source| PipelineError::Io {
        path: path.to_owned(),
        source,
    })?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigests {
    pub detections_rgb: FileDigest,
    pub detections_thermal: FileDigest,
    pub images_root: String,
    /// Only images that had detections (and were therefore read).
    pub images: Vec<FileDigest>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub images: usize,
    pub pairs: usize,
    pub fused: usize,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub load_ms: u64,
    pub language_ms: u64,
    pub fusion_ms: u64,
    pub write_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSummary {
    pub dir: Option<String>,
    pub hits: u64,
    pub misses: u64,
}

/// Everything needed to reproduce a run given the response cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: String,
    pub tool_version: String,
    pub client_id: String,
    pub config: PipelineConfig,
    pub inputs: InputDigests,
    pub output: FileDigest,
    pub cache: CacheSummary,
    pub calls: CallCounts,
    pub counts: RunCounts,
    pub timings: StageTimings,
}

/// `fused.json` -> `fused.manifest.json`.
pub fn manifest_path(out_path: &Path) -> PathBuf {
    out_path.with_extension("manifest.json")
}

fn elapsed_ms(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

/// Runs the full pipeline and writes the fused detections to `out_path`
/// and the run manifest next to it.
pub fn run_pipeline(
    det_rgb_path: &Path,
    det_t_path: &Path,
    images_root: &Path,
    config: &PipelineConfig,
    client: &ClientStack,
    out_path: &Path,
) -> Result<RunManifest, PipelineError> {
    let t = Instant::now();
    let inputs = load_inputs(det_rgb_path, det_t_path, images_root)?;
    let mut images = Vec::new();
    for img in inputs
        .images
        .iter()
        .filter(|i| !i.rgb.is_empty() || !i.thermal.is_empty())
    {
        images.push(digest_file(&io::resolve(images_root, &img.entry.path_rgb))?);
        images.push(digest_file(&io::resolve(
            images_root,
            &img.entry.path_thermal,
        ))?);
    }
    let load_ms = elapsed_ms(t);

    let t = Instant::now();
    let langs = run_language_stage(&inputs, config, client.client())?;
    let language_ms = elapsed_ms(t);

    let t = Instant::now();
    let fused = fuse_stage(
        &langs,
        &config.fusion,
        config.post_nms_iou,
        config.score_threshold,
    )?;
    let fusion_ms = elapsed_ms(t);

    let t = Instant::now();
    save_fused(out_path, &fused)?;
    let output = digest_file(out_path)?;
    let write_ms = elapsed_ms(t);

    let stats = client.cache_stats();
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION.into(),
        tool_version: TOOL_VERSION.into(),
        client_id: client.id(),
        config: config.clone(),
        inputs: InputDigests {
            detections_rgb: digest_file(det_rgb_path)?,
            detections_thermal: digest_file(det_t_path)?,
            images_root: images_root.display().to_string(),
            images,
        },
        output,
        cache: CacheSummary {
            dir: client.cache_dir().map(|d| d.display().to_string()),
            hits: stats.hits,
            misses: stats.misses,
        },
        calls: client.calls(),
        counts: RunCounts {
            images: inputs.images.len(),
            pairs: langs.iter().map(|l| l.pairs.len()).sum(),
            fused: fused.len(),
            fallbacks: langs.iter().map(|l| l.failures.len()).sum(),
        },
        timings: StageTimings {
            load_ms,
            language_ms,
            fusion_ms,
            write_ms,
        },
    };
    write_json(&manifest_path(out_path), &manifest)?;
    Ok(manifest)
}

/// Re-runs a recorded run using only cached replies. Inputs must still
/// hash to the recorded digests; the result is written to `out_path` and
/// its digest should equal the recorded output digest.
pub fn replay(
    manifest: &RunManifest,
    cache_dir: &Path,
    out_path: &Path,
) -> Result<RunManifest, PipelineError> {
    let rgb = Path::new(&manifest.inputs.detections_rgb.path);
    let thermal = Path::new(&manifest.inputs.detections_thermal.path);
    for recorded in [
        &manifest.inputs.detections_rgb,
        &manifest.inputs.detections_thermal,
    ]
    .into_iter()
    .chain(&manifest.inputs.images)
    {
        let now = digest_file(Path::new(&recorded.path))?;
        if now.sha256 != recorded.sha256 {
            return Err(PipelineError::Schema {
                path: PathBuf::from(&recorded.path),
                message: "input changed since the recorded run".into(),
            });
        }
    }
    let client = ClientStack::offline(&manifest.client_id, Some(cache_dir))?;
    run_pipeline(
        rgb,
        thermal,
        Path::new(&manifest.inputs.images_root),
        &manifest.config,
        &client,
        out_path,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub fusion: FusionConfig,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub calls: CallCounts,
}

impl AblationTable {
    /// Fixed-width console table, one row per configuration.
    pub fn render(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(0)
            .max(6);
        let mut s = format!("{:<width$} {}\n", "config", EvalReport::table_header());
        for r in &self.rows {
            s.push_str(&format!("{:<width$} {}\n", r.label, r.report.table_row()));
        }
        s
    }
}

/// Runs the language branch once, then fuses and evaluates once per
/// configuration in `grid`.
pub fn run_ablation(
    inputs: &PipelineInputs,
    grid: &[FusionConfig],
    gt: &GroundTruthFile,
    config: &PipelineConfig,
    client: &ClientStack,
) -> Result<AblationTable, PipelineError> {
    let langs = run_language_stage(inputs, config, client.client())?;
    let images = eval_images(&inputs.image_infos(), gt);
    let rows = grid
        .iter()
        .map(|fusion| {
            let fused = fuse_stage(&langs, fusion, config.post_nms_iou, config.score_threshold)?;
            Ok(AblationRow {
                label: fusion.label(),
                fusion: *fusion,
                report: evaluate_all(&fused, gt, &images, config.eval_iou)?,
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(AblationTable {
        rows,
        calls: client.calls(),
    })
}
