use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use msfuse::fusion::FusionConfig;
use msfuse::language::{CacheStats, CallCounts};
use msfuse::pairing::{dpair, PairedDetection};
use msfuse::pipeline::{
    self, describe_stage, eval_images, evaluate_all, fuse_stage, load_config, load_fused,
    load_ground_truth, load_inputs, load_language, run_ablation, save_fused, save_language,
    score_stage, write_json, ClientKind, ClientStack, PipelineConfig, PipelineError, RunManifest,
};
use msfuse::vcm::{vcm_batch, ImageBuffer};
use msfuse::Modality;

#[derive(Parser)]
#[command(
    name = "msfuse",
    version,
    about = "Language-driven fusion of RGB and thermal detections"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON configuration file; unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for the persistent response cache.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    client: Option<ClientArg>,
    /// Seed for the mock client.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    max_inflight: Option<usize>,
    /// Enable NMS across fused detections at this IoU.
    #[arg(long, global = true, value_name = "IOU")]
    post_nms: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClientArg {
    Mock,
    Http,
}

#[derive(Args)]
struct DetInputs {
    /// RGB detection file.
    #[arg(long)]
    rgb: PathBuf,
    /// Thermal detection file.
    #[arg(long)]
    thermal: PathBuf,
    /// Directory that manifest image paths are relative to.
    #[arg(long, default_value = ".")]
    images_root: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    /// The four score-strategy combinations.
    Score,
    /// The eight box-strategy combinations.
    Box,
    Default,
}

#[derive(Subcommand)]
enum Command {
    /// Pair RGB and thermal detections per image.
    Pair {
        #[command(flatten)]
        inputs: DetInputs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the marked crops of every pair as PNG files.
    Vcm {
        #[command(flatten)]
        inputs: DetInputs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Describe every marked crop; writes a language file without scores.
    Describe {
        #[command(flatten)]
        inputs: DetInputs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the pairs of a language file.
    Mscot {
        #[arg(long)]
        language: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse a scored language file into final detections.
    Fuse {
        #[arg(long)]
        language: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate fused detections against ground truth.
    Eval {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Detection file whose manifest supplies image conditions.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a grid of fusion strategies over one language run.
    Ablate {
        #[command(flatten)]
        inputs: DetInputs,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value = "score")]
        grid: Grid,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole pipeline and write fused detections plus a manifest.
    Run {
        #[command(flatten)]
        inputs: DetInputs,
        #[arg(long)]
        out: PathBuf,
        /// Also evaluate against this ground truth.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Reproduce a recorded run from its manifest and the cache.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn build_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = match &g.config {
        Some(p) => load_config(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(c) = g.client {
        cfg.client.kind = match c {
            ClientArg::Mock => ClientKind::Mock,
            ClientArg::Http => ClientKind::Http,
        };
    }
    if let Some(s) = g.seed {
        cfg.client.seed = s;
    }
    if let Some(n) = g.max_inflight {
        cfg.max_inflight = n;
    }
    if let Some(iou) = g.post_nms {
        cfg.post_nms_iou = Some(iou);
    }
    Ok(cfg)
}

fn report_client(client: &ClientStack) {
    let CallCounts {
        describe_image,
        complete,
        failed,
    } = client.calls();
    let CacheStats { hits, misses } = client.cache_stats();
    eprintln!(
        "client {}: {describe_image} describe, {complete} complete, {failed} failed; cache {hits} hits, {misses} misses",
        client.id()
    );
}

fn cmd_pair(inputs: &DetInputs, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let loaded = load_inputs(&inputs.rgb, &inputs.thermal, &inputs.images_root)?;
    let mut pairs: BTreeMap<String, Vec<PairedDetection>> = BTreeMap::new();
    for img in &loaded.images {
        pairs.insert(
            img.entry.image_id.clone(),
            dpair(&img.rgb, &img.thermal, &cfg.pairing).map_err(PipelineError::from)?,
        );
    }
    write_json(out, &pairs)?;
    eprintln!(
        "{} pairs over {} images",
        pairs.values().map(Vec::len).sum::<usize>(),
        pairs.len()
    );
    Ok(())
}

fn cmd_vcm(inputs: &DetInputs, cfg: &PipelineConfig, out_dir: &Path) -> Result<()> {
    let loaded = load_inputs(&inputs.rgb, &inputs.thermal, &inputs.images_root)?;
    std::fs::create_dir_all(out_dir).with_context(|| out_dir.display().to_string())?;
    let mut written = 0usize;
    for img in &loaded.images {
        if img.rgb.is_empty() && img.thermal.is_empty() {
            continue;
        }
        let pairs = dpair(&img.rgb, &img.thermal, &cfg.pairing).map_err(PipelineError::from)?;
        for (side, rel) in [
            (Modality::Rgb, &img.entry.path_rgb),
            (Modality::Thermal, &img.entry.path_thermal),
        ] {
            let path = inputs.images_root.join(rel);
            let image = ImageBuffer::open(&path).map_err(|source| PipelineError::Image {
                path: path.clone(),
                source,
            })?;
            let crops = vcm_batch(&image, &pairs, side).map_err(|source| PipelineError::Image {
                path: path.clone(),
                source,
            })?;
            for c in crops {
                let name = format!(
                    "{}_{:03}_{}.png",
                    img.entry.image_id,
                    c.pair_index,
                    side.as_str()
                );
                let dest = out_dir.join(name);
                c.image
                    .save_png(&dest)
                    .map_err(|source| PipelineError::Image { path: dest, source })?;
                written += 1;
            }
        }
    }
    eprintln!("wrote {written} crops to {}", out_dir.display());
    Ok(())
}

fn eval_and_print(
    fused: &[msfuse::FusedDetection],
    gt_path: &Path,
    manifest: &[msfuse::evaluation::ImageInfo],
    cfg: &PipelineConfig,
    out: Option<&Path>,
) -> Result<()> {
    let gt = load_ground_truth(gt_path)?;
    let images = eval_images(manifest, &gt);
    let report = evaluate_all(fused, &gt, &images, cfg.eval_iou)?;
    println!("{}", msfuse::EvalReport::table_header());
    println!("{}", report.table_row());
    if let Some(out) = out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli.global)?;
    let cache_dir = cli.global.cache_dir.as_deref();
    match &cli.command {
        Command::Pair { inputs, out } => cmd_pair(inputs, &cfg, out),
        Command::Vcm { inputs, out_dir } => cmd_vcm(inputs, &cfg, out_dir),
        Command::Describe { inputs, out } => {
            let client = ClientStack::from_config(&cfg.client, cache_dir)?;
            let loaded = load_inputs(&inputs.rgb, &inputs.thermal, &inputs.images_root)?;
            let langs = describe_stage(&loaded, &cfg, client.client())?;
            save_language(out, &langs)?;
            report_client(&client);
            Ok(())
        }
        Command::Mscot { language, out } => {
            let client = ClientStack::from_config(&cfg.client, cache_dir)?;
            let mut langs = load_language(language)?;
            score_stage(&mut langs, &cfg, client.client())?;
            save_language(out, &langs)?;
            let fallbacks: usize = langs.iter().map(|l| l.failures.len()).sum();
            if fallbacks > 0 {
                eprintln!("{fallbacks} pairs fell back to vision-only fusion");
            }
            report_client(&client);
            Ok(())
        }
        Command::Fuse { language, out } => {
            let langs = load_language(language)?;
            let fused = fuse_stage(&langs, &cfg.fusion, cfg.post_nms_iou, cfg.score_threshold)?;
            save_fused(out, &fused)?;
            eprintln!("{} fused detections", fused.len());
            Ok(())
        }
        Command::Eval {
            fused,
            gt,
            manifest,
            out,
        } => {
            let dets = load_fused(fused)?;
            let infos = match manifest {
                Some(p) => pipeline::load_detections(p)?
                    .manifest
                    .iter()
                    .map(pipeline::ManifestEntry::image_info)
                    .collect(),
                None => Vec::new(),
            };
            eval_and_print(&dets, gt, &infos, &cfg, out.as_deref())
        }
        Command::Ablate {
            inputs,
            gt,
            grid,
            out,
        } => {
            let client = ClientStack::from_config(&cfg.client, cache_dir)?;
            let loaded = load_inputs(&inputs.rgb, &inputs.thermal, &inputs.images_root)?;
            let gt = load_ground_truth(gt)?;
            let grid = match grid {
                Grid::Score => FusionConfig::score_grid(),
                Grid::Box => FusionConfig::box_grid(),
                Grid::Default => vec![cfg.fusion],
            };
            let table = run_ablation(&loaded, &grid, &gt, &cfg, &client)?;
            print!("{}", table.render());
            if let Some(out) = out {
                write_json(out, &table)?;
            }
            report_client(&client);
            Ok(())
        }
        Command::Run { inputs, out, gt } => {
            let client = ClientStack::from_config(&cfg.client, cache_dir)?;
            let manifest = pipeline::run_pipeline(
                &inputs.rgb,
                &inputs.thermal,
                &inputs.images_root,
                &cfg,
                &client,
                out,
            )?;
            eprintln!(
                "{} images, {} pairs, {} fused ({} fallbacks) -> {}",
                manifest.counts.images,
                manifest.counts.pairs,
                manifest.counts.fused,
                manifest.counts.fallbacks,
                out.display()
            );
            report_client(&client);
            if let Some(gt) = gt {
                let loaded = load_inputs(&inputs.rgb, &inputs.thermal, &inputs.images_root)?;
                let dets = load_fused(out)?;
                eval_and_print(&dets, gt, &loaded.image_infos(), &cfg, None)?;
            }
            Ok(())
        }
        Command::Replay { manifest, out } => {
            let recorded: RunManifest = load_config(manifest)?;
            let dir = cache_dir
                .map(Path::to_path_buf)
                .or_else(|| recorded.cache.dir.as_ref().map(PathBuf::from))
                .context("no cache directory given or recorded")?;
            let replayed = pipeline::replay(&recorded, &dir, out)?;
            if replayed.output.sha256 != recorded.output.sha256 {
                anyhow::bail!("replayed output differs from the recorded run");
            }
            eprintln!("replay matches recorded output {}", recorded.output.sha256);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<PipelineError>()
                .map(PipelineError::exit_code)
                .unwrap_or(2);
            ExitCode::from(code as u8)
        }
    }
}
