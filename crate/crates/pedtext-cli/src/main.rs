use std::collections::BTreeMap;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use pedtext::checkpoint::Checkpoint;
use pedtext::config::{manifest_base, BackendConfig, PathsConfig, RunConfig};
use pedtext::data::{load_manifest, save_manifest, DatasetManifest, PersonRecord};
use pedtext::eval::{cross_domain_evaluate, evaluate};
use pedtext::finetune::finetune_loop;
use pedtext::generator::{caption_manifest, corpus_stats, CaptionGenerator, PromptBank};
use pedtext::pretrain::pretrain_loop;
use pedtext::scorer::{serve_plugin, MockBackend};
use pedtext::toy::toy_benchmark;
use pedtext::{Error, Result};

const EXIT_VALIDATION: u8 = 2;
const EXIT_PIPELINE: u8 = 3;

#[derive(Parser)]
#[command(name = "pedtext", version, about = "Pseudo-caption generation, pre-training and text-to-person retrieval")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (or directory for `toy`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Caption every image of a directory or uncaptioned manifest.
    Generate(GenerateArgs),
    /// Optional-attribute statistics of a captioned manifest.
    Stats {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Contrastive (+ masked-language-model) pre-training.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning on identity labels.
    Finetune(FinetuneArgs),
    /// Rank-k retrieval accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Writes the synthetic benchmark: uncaptioned images, their true
    /// attributes and a matching run configuration.
    Toy,
    /// Serves the mock scorer over the plugin protocol on stdin/stdout.
    #[command(hide = true)]
    MockPlugin {
        #[arg(long, default_value_t = MockBackend::DEFAULT_DIMENSION)]
        dimension: usize,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    ontology: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    /// mock, scripted:TRUTH or plugin:COMMAND.
    #[arg(long)]
    backend: Option<BackendConfig>,
    /// Embedding width the backend returns.
    #[arg(long)]
    dimension: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    beta: Option<u8>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Pre-trained checkpoint; random initialisation when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<u8>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    manifest_b: Option<PathBuf>,
    /// Evaluate on `--manifest-b`, counting tokens the checkpoint never saw.
    #[arg(long)]
    cross_domain: bool,
}

/// Provenance written next to every output artifact.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a RunConfig,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Content hash of a file, or of a directory's sorted file list and
/// contents.
fn sha256_path(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return sha256_file(path);
    }
    let mut hasher = Sha256::new();
    for f in image_files(path)? {
        hasher.update(f.strip_prefix(path).unwrap_or(&f).to_string_lossy().as_bytes());
        hasher.update(sha256_file(&f)?.as_bytes());
    }
    Ok(hex::encode(hasher.finalize()))
}

fn write_run_manifest(command: &str, config: &RunConfig, inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    let Some(first) = outputs.first() else {
        return Ok(());
    };
    let hashes = |paths: &[&Path]| -> Result<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| Ok((p.display().to_string(), sha256_path(p)?)))
            .collect()
    };
    let record = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config,
        inputs: hashes(inputs)?,
        outputs: hashes(outputs)?,
    };
    let mut name = first.as_os_str().to_owned();
    name.push(".run.json");
    let w = BufWriter::new(std::fs::File::create(PathBuf::from(name))?);
    serde_json::to_writer_pretty(w, &record)?;
    Ok(())
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Validation(format!("--{flag} is required (or set it in the config file)")))
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "jpg" | "jpeg")
            ) {
                files.push(p);
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Path of `target` as seen from `from`: relative when `target` lies below
/// it, absolute otherwise.
fn relative_to(target: &Path, from: &Path) -> Result<String> {
    let target = target.canonicalize()?;
    let from = from.canonicalize()?;
    Ok(target
        .strip_prefix(&from)
        .map(Path::to_path_buf)
        .unwrap_or(target)
        .to_string_lossy()
        .into_owned())
}

/// Uncaptioned records for `images`, with image paths rewritten to
/// resolve against `out_dir`.
fn image_manifest(images: &Path, out_dir: &Path) -> Result<(DatasetManifest, PathBuf)> {
    if images.is_dir() {
        let records = image_files(images)?
            .iter()
            .map(|f| {
                Ok(PersonRecord {
                    image_id: f.strip_prefix(images).unwrap_or(f).to_string_lossy().into_owned(),
                    image_ref: Some(relative_to(f, out_dir)?),
                    features: None,
                    caption: String::new(),
                    identity: None,
                    fills: None,
                    split: None,
                    template_id: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if records.is_empty() {
            return Err(Error::Validation(format!("{}: no PNG or JPEG files", images.display())));
        }
        return Ok((DatasetManifest::new(records)?, out_dir.to_path_buf()));
    }
    let mut manifest = load_manifest(images)?;
    let base = manifest_base(images);
    for r in &mut manifest.records {
        if let Some(p) = &r.image_ref {
            r.image_ref = Some(relative_to(&base.join(p), out_dir)?);
        }
    }
    Ok((manifest, out_dir.to_path_buf()))
}

fn out_dir(out: &Path) -> Result<PathBuf> {
    let dir = manifest_base(out);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn generate(mut cfg: RunConfig, args: GenerateArgs, out: Option<PathBuf>) -> Result<()> {
    cfg.paths.images = args.images.or(cfg.paths.images);
    cfg.paths.ontology = args.ontology.or(cfg.paths.ontology);
    cfg.paths.templates = args.templates.or(cfg.paths.templates);
    cfg.backend = args.backend.unwrap_or(cfg.backend);
    if let Some(d) = args.dimension {
        cfg.backend.set_dimension(d);
    }
    cfg.generate.threshold = args.threshold.unwrap_or(cfg.generate.threshold);
    cfg.generate.scale = args.scale.unwrap_or(cfg.generate.scale);
    cfg.workers = args.workers.unwrap_or(cfg.workers);
    cfg.validate()?;
    let images = require(&cfg.paths.images, "images")?;
    let out = require(&out, "out")?;

    let ontology = cfg.ontology()?;
    let templates = cfg.templates()?;
    let (uncaptioned, base) = image_manifest(images, &out_dir(out)?)?;
    let run = || -> Result<DatasetManifest> {
        let backend = cfg.backend.build(&ontology, cfg.seed)?;
        let bank = PromptBank::build(&ontology, backend.as_ref())?;
        let generator = CaptionGenerator {
            ontology: &ontology,
            templates: &templates,
            backend: backend.as_ref(),
            bank: &bank,
            config: &cfg.generate,
        };
        caption_manifest(&generator, &uncaptioned, &base, cfg.seed, cfg.workers)
    };
    let manifest = run().map_err(|e| e.in_stage("generate"))?;
    save_manifest(&manifest, out)?;
    log::info!("wrote {} captions to {}", manifest.len(), out.display());

    let mut inputs = vec![images];
    inputs.extend(cfg.paths.ontology.as_deref());
    inputs.extend(cfg.paths.templates.as_deref());
    if let BackendConfig::Scripted { truth, .. } = &cfg.backend {
        inputs.push(truth);
    }
    write_run_manifest("generate", &cfg, &inputs, &[out])
}

fn stats(mut cfg: RunConfig, manifest: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    cfg.paths.manifest = manifest.or(cfg.paths.manifest);
    cfg.validate()?;
    let path = require(&cfg.paths.manifest, "manifest")?;
    let stats = corpus_stats(&load_manifest(path)?);
    print!("{stats}");
    if let Some(out) = &out {
        out_dir(out)?;
        std::fs::write(out, serde_json::to_string_pretty(&stats)? + "\n")?;
        write_run_manifest("stats", &cfg, &[path], &[out])?;
    }
    Ok(())
}

fn pretrain(mut cfg: RunConfig, args: PretrainArgs, out: Option<PathBuf>) -> Result<()> {
    cfg.paths.manifest = args.manifest.or(cfg.paths.manifest);
    let p = &mut cfg.pretrain;
    p.beta = args.beta.unwrap_or(p.beta);
    p.epochs = args.epochs.unwrap_or(p.epochs);
    p.batch_size = args.batch_size.unwrap_or(p.batch_size);
    p.lr = args.lr.unwrap_or(p.lr);
    cfg.validate()?;
    let path = require(&cfg.paths.manifest, "manifest")?;
    let out = require(&out, "out")?;
    let manifest = load_manifest(path)?;
    let run = pretrain_loop(&manifest, &manifest_base(path), &cfg.pretrain, cfg.seed)?;
    if let Some(last) = run.history.last() {
        log::info!("final pre-training loss {:.4}", last.report.pre);
    }
    out_dir(out)?;
    run.checkpoint.save(out)?;
    write_run_manifest("pretrain", &cfg, &[path], &[out])
}

fn finetune(mut cfg: RunConfig, args: FinetuneArgs, out: Option<PathBuf>) -> Result<()> {
    cfg.paths.manifest = args.manifest.or(cfg.paths.manifest);
    cfg.paths.init = args.init.or(cfg.paths.init);
    let f = &mut cfg.finetune;
    f.gamma = args.gamma.unwrap_or(f.gamma);
    f.alpha = args.alpha.unwrap_or(f.alpha);
    f.epochs = args.epochs.unwrap_or(f.epochs);
    f.batch_size = args.batch_size.unwrap_or(f.batch_size);
    cfg.validate()?;
    let path = require(&cfg.paths.manifest, "manifest")?;
    let out = require(&out, "out")?;
    let manifest = load_manifest(path)?;
    let init = cfg.paths.init.as_deref().map(Checkpoint::load).transpose()?;
    if init.is_none() {
        log::warn!("no --init checkpoint; fine-tuning from random initialisation");
    }
    let run = finetune_loop(&manifest, &manifest_base(path), init.as_ref(), &cfg.finetune, cfg.seed)?;
    if let Some(last) = run.history.last() {
        log::info!("final fine-tuning loss {:.4}", last.report.ft);
    }
    out_dir(out)?;
    run.checkpoint.save(out)?;
    let mut inputs = vec![path];
    inputs.extend(cfg.paths.init.as_deref());
    write_run_manifest("finetune", &cfg, &inputs, &[out])
}

fn eval(mut cfg: RunConfig, args: EvalArgs, out: Option<PathBuf>) -> Result<()> {
    cfg.paths.checkpoint = args.ckpt.or(cfg.paths.checkpoint);
    cfg.paths.manifest = args.manifest.or(cfg.paths.manifest);
    cfg.paths.manifest_b = args.manifest_b.or(cfg.paths.manifest_b);
    cfg.validate()?;
    let ckpt_path = require(&cfg.paths.checkpoint, "ckpt")?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let mut inputs = vec![ckpt_path];

    let record = if args.cross_domain {
        let path_b = require(&cfg.paths.manifest_b, "manifest-b")?;
        inputs.push(path_b);
        let cross = cross_domain_evaluate(&ckpt, &load_manifest(path_b)?, &manifest_base(path_b))
            .map_err(|e| e.in_stage("eval"))?;
        if let Some(path_a) = cfg.paths.manifest.as_deref() {
            inputs.push(path_a);
            let in_domain = evaluate(&ckpt, &load_manifest(path_a)?, &manifest_base(path_a))
                .map_err(|e| e.in_stage("eval"))?;
            println!("in-domain\n{in_domain}");
            if cross.report.rank1 > in_domain.rank1 {
                log::info!("cross-domain Rank-1 exceeds in-domain Rank-1");
            }
        }
        println!("cross-domain ({} of {} query tokens unknown)\n{}", cross.unknown_tokens, cross.total_tokens, cross.report);
        serde_json::to_value(&cross)?
    } else {
        if cfg.paths.manifest_b.is_some() {
            return Err(Error::Validation("--manifest-b needs --cross-domain".into()));
        }
        let path = require(&cfg.paths.manifest, "manifest")?;
        inputs.push(path);
        let report = evaluate(&ckpt, &load_manifest(path)?, &manifest_base(path)).map_err(|e| e.in_stage("eval"))?;
        print!("{report}");
        serde_json::to_value(&report)?
    };
    if let Some(out) = &out {
        out_dir(out)?;
        std::fs::write(out, serde_json::to_string_pretty(&record)? + "\n")?;
        write_run_manifest("eval", &cfg, &inputs, &[out])?;
    }
    Ok(())
}

fn toy(cfg: RunConfig, out: Option<PathBuf>) -> Result<()> {
    cfg.validate()?;
    let dir = require(&out, "out")?;
    std::fs::create_dir_all(dir)?;
    let ontology = cfg.ontology()?;
    let bench = toy_benchmark(&ontology, &cfg.toy, cfg.seed)?;
    let images = dir.join("images.jsonl");
    let truth = dir.join("truth.json");
    save_manifest(&bench.images, &images)?;
    std::fs::write(&truth, serde_json::to_string_pretty(&bench.truth)? + "\n")?;

    // A configuration that reproduces the benchmark run from this directory.
    let toy_cfg = RunConfig {
        seed: cfg.seed,
        toy: cfg.toy.clone(),
        paths: PathsConfig {
            images: Some(images.clone()),
            ..PathsConfig::default()
        },
        backend: BackendConfig::Scripted {
            truth: truth.clone(),
            dimension: pedtext::toy::SCRIPT_DIMENSION,
        },
        ..RunConfig::toy()
    };
    let config = dir.join("config.json");
    std::fs::write(&config, toy_cfg.to_json() + "\n")?;
    log::info!("wrote {} images, truth and config to {}", bench.images.len(), dir.display());
    write_run_manifest("toy", &cfg, &[], &[&images, &truth, &config])
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    match cli.command {
        Command::Generate(a) => generate(cfg, a, cli.out),
        Command::Stats { manifest } => stats(cfg, manifest, cli.out),
        Command::Pretrain(a) => pretrain(cfg, a, cli.out),
        Command::Finetune(a) => finetune(cfg, a, cli.out),
        Command::Eval(a) => eval(cfg, a, cli.out),
        Command::Toy => toy(cfg, cli.out),
        Command::MockPlugin { dimension } => {
            let backend = MockBackend::new(cfg.seed, dimension);
            let stdin = std::io::stdin().lock();
            serve_plugin(&backend, stdin, std::io::stdout().lock())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_PIPELINE })
        }
    }
}
