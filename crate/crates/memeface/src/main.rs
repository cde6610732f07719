//! Command-line front end.

use std::fs::File;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use memeface_core::damsm::{pretrain_damsm, Damsm, PretrainConfig};
use memeface_core::kernels::Exec;
use memeface_core::pipeline::features::ThumbnailFeatures;
use memeface_core::pipeline::ocr::TsvCaptions;
use memeface_core::pipeline::{load_training_set, manifest_vocabulary, run_pipeline, DatasetManifest, PipelineConfig, Split};
use memeface_core::synth::write_raw_corpus;
use memeface_core::trainer::train::{damsm_checkpoint, restore_damsm, DAMSM_FILE_NAME};
use memeface_core::trainer::{load_checkpoint, save_checkpoint, TrainConfig, Trainer, UpdateSchedule};
use memeface_core::ModelConfig;
use memeface_service::{GenerateRequest, Service, ServiceConfig};

pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Parser)]
#[command(name = "memeface", version, about = "Caption-to-meme-face GAN: curate, pretrain, train, serve")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic raw corpus: PNGs with caption bands plus captions.tsv.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Curate raw images and captions into a manifest directory.
    Curate {
        #[arg(long)]
        input: PathBuf,
        /// Sidecar TSV of `file<TAB>caption`; defaults to INPUT/captions.tsv.
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON pipeline config; fields not given keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the image-text matching model on a curated manifest.
    PretrainDamsm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON model config; `vocab_size` is taken from the manifest.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 14)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the GAN, writing checkpoints and a JSONL log.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Pretrained matching-model checkpoint.
        #[arg(long)]
        damsm: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON training config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        checkpoint_period: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        alternating: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Serve the HTTP demo.
    Serve {
        #[command(flatten)]
        service: ServiceArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
    },
    /// Run one caption through every checkpoint and write the frames as PNGs.
    Generate {
        #[command(flatten)]
        service: ServiceArgs,
        #[arg(long)]
        text: String,
        #[arg(long)]
        template: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct ServiceArgs {
    #[arg(long, env = "MEMEFACE_CHECKPOINTS")]
    checkpoints: PathBuf,
    /// Defaults to CHECKPOINTS/vocab.txt.
    #[arg(long, env = "MEMEFACE_VOCAB")]
    vocab: Option<PathBuf>,
    /// Curated manifest directory holding the cluster templates.
    #[arg(long, env = "MEMEFACE_TEMPLATES")]
    templates: PathBuf,
    #[arg(long)]
    default_template: Option<usize>,
    #[arg(long)]
    output_resolution: Option<usize>,
    #[arg(long, default_value_t = 8, env = "MEMEFACE_CACHE_SIZE")]
    cache_size: usize,
}

impl ServiceArgs {
    fn config(self) -> ServiceConfig {
        ServiceConfig {
            vocab_path: self.vocab.unwrap_or_else(|| self.checkpoints.join(VOCAB_FILE)),
            checkpoint_dir: self.checkpoints,
            manifest_dir: self.templates,
            default_template: self.default_template,
            output_resolution: self.output_resolution,
            cache_size: self.cache_size,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parse {}", path.display()))
}

fn curate(input: &Path, captions: Option<PathBuf>, out: &Path, config: Option<PathBuf>, k: Option<usize>, seed: Option<u64>) -> Result<()> {
    let mut cfg: PipelineConfig = match config {
        Some(p) => read_json(&p)?,
        None => PipelineConfig::default(),
    };
    if let Some(k) = k {
        cfg.k = k;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let tsv = captions.unwrap_or_else(|| input.join("captions.tsv"));
    let source = TsvCaptions::load(&tsv)?;
    let (manifest, report) = run_pipeline(input, &source, out, &cfg, &ThumbnailFeatures::default(), Exec::default())?;
    log::info!("{report:?}");
    println!(
        "{} raw -> {} curated in {} clusters ({} train / {} test)",
        report.raw,
        manifest.samples.len(),
        manifest.clusters.len(),
        report.train,
        report.test
    );
    Ok(())
}

fn pretrain(data: &Path, out: &Path, model: Option<PathBuf>, epochs: usize, batch_size: usize, seed: u64) -> Result<()> {
    let manifest = DatasetManifest::load(data)?;
    let vocab = manifest_vocabulary(&manifest);
    let mut cfg: ModelConfig = match model {
        Some(p) => read_json(&p)?,
        None => ModelConfig::default(),
    };
    cfg.vocab_size = vocab.len();
    cfg.validate()?;
    let set = load_training_set(data, &manifest, &cfg, &vocab, Split::Train)?;
    let pairs: Vec<_> = set
        .samples
        .iter()
        .map(|s| (s.real.last().expect("stages").clone(), s.caption.clone()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut damsm = Damsm::new(&cfg, &mut rng);
    let pc = PretrainConfig { epochs, batch_size, seed, ..PretrainConfig::default() };
    let report = pretrain_damsm(&pairs, &mut damsm, &pc)?;
    std::fs::create_dir_all(out)?;
    save_checkpoint(&damsm_checkpoint(&damsm, &cfg, epochs as u64)?, &out.join(DAMSM_FILE_NAME))?;
    vocab.save(&out.join(VOCAB_FILE))?;
    println!("pretrained on {} pairs; final loss {:.4}", pairs.len(), report.epoch_losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &Path,
    damsm_path: &Path,
    out: &Path,
    config: Option<PathBuf>,
    epochs: Option<usize>,
    checkpoint_period: Option<usize>,
    batch_size: Option<usize>,
    alternating: bool,
    seed: Option<u64>,
) -> Result<()> {
    let mut tc: TrainConfig = match config {
        Some(p) => read_json(&p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    if let Some(p) = checkpoint_period {
        tc.checkpoint_period_epochs = p;
    }
    if let Some(b) = batch_size {
        tc.batch_size = b;
    }
    if alternating {
        tc.schedule = UpdateSchedule::PerBatchAlternating;
    }
    if let Some(s) = seed {
        tc.seed = s;
    }
    let (model, damsm) = restore_damsm(&load_checkpoint(damsm_path)?)?;
    let manifest = DatasetManifest::load(data)?;
    let vocab = manifest_vocabulary(&manifest);
    if vocab.len() != model.vocab_size {
        bail!("manifest vocabulary has {} tokens, matching model expects {}", vocab.len(), model.vocab_size);
    }
    let set = load_training_set(data, &manifest, &model, &vocab, Split::Train)?;
    std::fs::create_dir_all(out)?;
    vocab.save(&out.join(VOCAB_FILE))?;
    let mut log = BufWriter::new(File::create(out.join("train_log.jsonl"))?);
    let mut trainer = Trainer::new(model, tc, damsm)?;
    let report = trainer.run(&set, Some(out), Some(&mut log))?;
    println!("wrote {} checkpoints to {}", report.checkpoint_paths.len(), out.display());
    Ok(())
}

async fn serve(config: ServiceConfig, listen: SocketAddr) -> Result<()> {
    let service = Arc::new(Service::open(config));
    let health = memeface_service::health(&service);
    log::info!("starting with {health:?}");
    let listener = tokio::net::TcpListener::bind(listen).await?;
    println!("listening on http://{listen}");
    memeface_service::serve(listener, service).await?;
    Ok(())
}

fn generate(config: ServiceConfig, text: String, template: Option<usize>, seed: Option<u64>, out: &Path) -> Result<()> {
    use base64::Engine;
    let service = Service::open(config);
    let resp = service
        .handle_generate(&GenerateRequest { text, template_id: template, seed })
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    std::fs::create_dir_all(out)?;
    for f in &resp.frames {
        let png = base64::engine::general_purpose::STANDARD.decode(&f.image_b64)?;
        std::fs::write(out.join(format!("epoch_{:06}.png", f.epoch)), png)?;
    }
    for line in &resp.log {
        println!("{line}");
    }
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::SynthCorpus { out, n, resolution, seed } => {
            let tsv = write_raw_corpus(&out, n, resolution, seed)?;
            println!("wrote {n} images and {}", tsv.display());
        }
        Command::Curate { input, captions, out, config, k, seed } => curate(&input, captions, &out, config, k, seed)?,
        Command::PretrainDamsm { data, out, model, epochs, batch_size, seed } => {
            tokio::task::block_in_place(|| pretrain(&data, &out, model, epochs, batch_size, seed))?
        }
        Command::Train { data, damsm, out, config, epochs, checkpoint_period, batch_size, alternating, seed } => {
            tokio::task::block_in_place(|| {
                train(&data, &damsm, &out, config, epochs, checkpoint_period, batch_size, alternating, seed)
            })?
        }
        Command::Serve { service, listen } => serve(service.config(), listen).await?,
        Command::Generate { service, text, template, seed, out } => {
            tokio::task::block_in_place(|| generate(service.config(), text, template, seed, &out))?
        }
    }
    Ok(())
}
