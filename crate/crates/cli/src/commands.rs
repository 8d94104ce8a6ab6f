use std::fs;
use std::path::{Path, PathBuf};

use pace_core::corpus::{generate_corpus_with, read_corpus, write_corpus, Corpus, Split};
use pace_core::evalsuite::{
    clip_attention, evaluation_inputs, extract_split, finetune_probe, retrieve_topk, write_attention,
    write_retrieval_report, RETRIEVAL_KS,
};
use pace_core::par::{with_workers, Exec};
use pace_core::rng::{derive_key, domain, StreamRng};
use pace_core::tensornet::checkpoint::load_checkpoint;
use pace_core::tensornet::gradcheck::grad_check;
use pace_core::tensornet::{Model, ModelConfig, Tensor};
use pace_core::trainer::{batch_objective, pretrain, TrainConfig};
use serde_json::json;

use crate::config::{ConfigError, RunConfig};
use crate::{Cli, Command};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] pace_core::Error),
    #[error("gradient check failed: max relative error {error:.3e} >= {threshold:.0e}")]
    GradientMismatch { error: f64, threshold: f64 },
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Core(pace_core::Error::Config { .. }) => 1,
            CliError::Core(_) | CliError::GradientMismatch { .. } => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub const RESOLVED_CONFIG: &str = "resolved.cfg";

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve()?;
    let workers = cfg.workers()?;
    for line in cfg.render().lines() {
        log::debug!("config {line}");
    }
    if let Some(out) = &cli.out {
        fs::create_dir_all(out)?;
        fs::write(out.join(RESOLVED_CONFIG), cfg.render())?;
    }
    let out = cli.out.as_deref();
    with_workers(workers, || match cli.command {
        Command::GenCorpus => gen_corpus(&cfg, required_out(out, "gen-corpus")?),
        Command::Pretrain => run_pretrain(&cfg, required_out(out, "pretrain")?),
        Command::Gradcheck => gradcheck(&cfg, out),
        Command::Probe => probe(&cfg, out),
        Command::Retrieve => retrieve(&cfg, out),
        Command::Attention => attention(&cfg, required_out(out, "attention")?),
    })
}

fn required_out<'a>(out: Option<&'a Path>, command: &str) -> Result<&'a Path> {
    out.ok_or_else(|| CliError::Usage(format!("{command} needs --out")))
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match cfg.corpus_dir() {
        Some(dir) => {
            log::info!("reading corpus from {}", dir.display());
            Ok(read_corpus(dir)?)
        }
        None => {
            let spec = cfg.corpus_spec()?;
            spec.validate()?;
            log::info!("generating {} videos", spec.num_videos);
            Ok(generate_corpus_with(&spec, Exec::Parallel)?)
        }
    }
}

fn channels(corpus: &Corpus) -> Result<usize> {
    corpus
        .videos
        .first()
        .map(|v| v.channels())
        .ok_or_else(|| CliError::Usage("corpus is empty".into()))
}

fn train_config(cfg: &RunConfig, corpus: &Corpus) -> Result<TrainConfig> {
    let tc = cfg.train_config(channels(corpus)?, Exec::Parallel)?;
    let v = &corpus.videos[0];
    if tc.crop.0 > v.height() || tc.crop.1 > v.width() {
        return Err(ConfigError::Value {
            key: "train.crop".into(),
            msg: format!("{}x{} crop exceeds {}x{} frames", tc.crop.0, tc.crop.1, v.height(), v.width()),
        }
        .into());
    }
    Ok(tc)
}

/// The checkpoint named in the config, or a seeded random network.
fn load_model(cfg: &RunConfig, model: &ModelConfig) -> Result<Model<f32>> {
    let m = match cfg.checkpoint() {
        Some(path) => {
            log::info!("loading checkpoint {}", path.display());
            load_checkpoint(path, model)?
        }
        None => {
            log::warn!("no checkpoint given; using a randomly initialized network");
            Model::new(model.clone(), derive_key(cfg.seed()?, &[domain::MODEL_INIT]))?
        }
    };
    Ok(m.with_exec(Exec::Parallel))
}

fn write_json(out: Option<&Path>, name: &str, text: &str) -> Result<()> {
    if let Some(dir) = out {
        fs::write(dir.join(name), format!("{text}\n"))?;
    }
    Ok(())
}

fn gen_corpus(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.corpus_spec()?;
    spec.validate()?;
    let corpus = generate_corpus_with(&spec, Exec::Parallel)?;
    let manifest = write_corpus(&corpus, out)?;
    println!("wrote {} videos, manifest {}", corpus.len(), manifest.display());
    Ok(())
}

fn run_pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let tc = train_config(cfg, &corpus)?;
    let result = pretrain(&corpus, &tc, Some(out))?;
    if let Some(last) = result.metrics.last() {
        println!(
            "final epoch {}: loss {:.4} pace_acc {:.3} val_pace_acc {:.3}",
            last.epoch, last.loss, last.pace_acc, last.val_pace_acc
        );
    }
    println!("checkpoint {}", out.join("final.pck").display());
    Ok(())
}

/// Gradient check of the configured training objective on a small random
/// batch. Rows `r` and `r + B/2` share a video; rows `2i` and `2i+1` share
/// a pace, so both contrastive variants have positives.
fn gradcheck(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let spec = cfg.corpus_spec()?;
    let pace = cfg.pace_config()?;
    let classes = pace.num_classes();
    let input = cfg.gradcheck_input(spec.channels)?;
    let model_cfg = cfg.model_config_for(input, classes)?;
    let batch = cfg.gradcheck_batch()?;
    if batch < 2 || batch % 2 != 0 {
        return Err(ConfigError::Value {
            key: "gradcheck.batch".into(),
            msg: "must be even and at least 2".into(),
        }
        .into());
    }
    let seed = cfg.seed()?;
    let mut model = Model::<f64>::new(model_cfg, derive_key(seed, &[domain::MODEL_INIT]))?;
    let mut rng = StreamRng::derive(seed, &[domain::GRADCHECK]);
    let dims = vec![batch, input.channels, input.frames, input.height, input.width];
    let n: usize = dims.iter().product();
    let x = Tensor::new(dims, (0..n).map(|_| rng.normal()).collect())?;
    let half = batch / 2;
    let vids: Vec<usize> = (0..batch).map(|r| r % half).collect();
    let labels: Vec<usize> = (0..batch).map(|r| (r / 2) % classes).collect();
    let (mode, sim, weights) = (cfg.contrastive()?, cfg.similarity()?, cfg.weights()?);
    let loss = |o: &_| batch_objective(o, &labels, &vids, mode, sim, &weights).map(|(l, up)| (l.total, up));
    let report = grad_check(
        &mut model,
        &x,
        &loss,
        cfg.gradcheck_eps()?,
        cfg.gradcheck_per_tensor()?,
        derive_key(seed, &[domain::GRADCHECK, 1]),
    )?;
    for t in &report.tensors {
        println!(
            "{:<24} coords {:>4} kinked {:>3} max_rel_error {:.3e}",
            t.name, t.coordinates, t.kinked, t.max_rel_error
        );
    }
    println!("max_rel_error {:.3e}", report.max_rel_error);
    let tensors: Vec<_> = report
        .tensors
        .iter()
        .map(|t| {
            json!({
                "name": t.name,
                "coordinates": t.coordinates,
                "kinked": t.kinked,
                "max_rel_error": t.max_rel_error,
            })
        })
        .collect();
    let doc = json!({ "max_rel_error": report.max_rel_error, "tensors": tensors });
    write_json(out, "gradcheck.json", &serde_json::to_string_pretty(&doc).map_err(pace_core::Error::from)?)?;
    let threshold = cfg.gradcheck_threshold()?;
    if report.max_rel_error.is_nan() || report.max_rel_error >= threshold {
        return Err(CliError::GradientMismatch {
            error: report.max_rel_error,
            threshold,
        });
    }
    Ok(())
}

fn probe(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let tc = train_config(cfg, &corpus)?;
    let model = load_model(cfg, &tc.model)?;
    let report = finetune_probe(&model, &corpus, &cfg.probe_config(Exec::Parallel)?)?;
    let text = serde_json::to_string(&report).map_err(pace_core::Error::from)?;
    println!("{text}");
    write_json(out, "probe.json", &text)
}

fn retrieve(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let tc = train_config(cfg, &corpus)?;
    let model = load_model(cfg, &tc.model)?;
    let layer = cfg.layer()?;
    let train = extract_split(&model, &corpus, Split::Train, layer)?;
    let test = extract_split(&model, &corpus, Split::Test, layer)?;
    let report = retrieve_topk(&train, &test, &RETRIEVAL_KS, cfg.per_clip()?)?;
    println!("{}", report.to_json()?);
    if let Some(dir) = out {
        write_retrieval_report(&report, dir)?;
    }
    Ok(())
}

/// Writes one attention map per evaluation clip of `eval.video`.
fn attention(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let tc = train_config(cfg, &corpus)?;
    let model = load_model(cfg, &tc.model)?;
    let video = cfg.eval_video()?;
    if video >= corpus.len() {
        return Err(ConfigError::Value {
            key: "eval.video".into(),
            msg: format!("video {video} out of range for {} videos", corpus.len()),
        }
        .into());
    }
    let blocks = tc.model.blocks.len();
    let block = cfg.eval_block()?.unwrap_or(blocks - 1);
    if block >= blocks {
        return Err(ConfigError::Value {
            key: "eval.block".into(),
            msg: format!("block {block} out of range for {blocks} blocks"),
        }
        .into());
    }
    let inputs = evaluation_inputs(&tc.model, &corpus.videos[video])?;
    let mut written: Vec<PathBuf> = Vec::new();
    for k in 0..inputs.dims()[0] {
        let map = clip_attention(&model, inputs.row(k), block)?;
        let path = out.join(format!("attention_v{video:05}_b{block}_c{k:02}.vpc"));
        write_attention(&map, &path)?;
        written.push(path);
    }
    println!("wrote {} attention maps for video {video}, block {block}", written.len());
    Ok(())
}
