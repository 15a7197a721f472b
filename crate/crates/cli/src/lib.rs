//! Pipeline commands behind the `gsaflow` binary.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gsaflow_core::check::{loss_gradient_report, GradCheckLine};
use gsaflow_core::checkpoint::{set_hash, Checkpoint};
use gsaflow_core::config::RunConfig;
use gsaflow_core::data::format::{read_dataset, write_dataset};
use gsaflow_core::data::{
    build_preference_pools, encode_caption, generate, DataConfig, DatasetSpec,
    Renderer, StorySequence,
};
use gsaflow_core::dpo::train_stage2;
use gsaflow_core::eval::{evaluate_consistency, held_out_accuracy, held_out_pairs, ConsistencyReport};
use gsaflow_core::flow::{euler_sample, SamplerConfig};
use gsaflow_core::model::{AdapterSet, Model, ModelConfig};
use gsaflow_core::tensor::Tensor;
use gsaflow_core::train::{pretrain_base, train_stage1, TrainError};

/// A NaN loss or failed gradient check. Maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("numerical failure: {0}")]
pub struct NumericalFailure(pub String);

const STAGE2_SEED_SALT: u64 = 0xd90_5eed;
const EVAL_SEED_SALT: u64 = 0xe7a1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => bail!("unknown split `{other}` (expected train or eval)"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    WithGsa,
    WithoutGsa,
}

impl EvalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "with-gsa" => Ok(EvalMode::WithGsa),
            "without-gsa" => Ok(EvalMode::WithoutGsa),
            other => bail!("unknown eval mode `{other}` (expected with-gsa or without-gsa)"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::WithGsa => "with-gsa",
            EvalMode::WithoutGsa => "without-gsa",
        }
    }
}

/// Reads a config file (or defaults) and applies a `--seed` override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn renderer_for(model: &ModelConfig) -> Result<Renderer> {
    Ok(Renderer::new(&DataConfig::for_model(model))?)
}

/// The dataset a split denotes: training identities `0..n`, or the
/// `eval_identities` unseen identities that follow them.
pub fn split_dataset(cfg: &RunConfig, split: Split) -> Result<Vec<StorySequence>> {
    let renderer = renderer_for(&cfg.model)?;
    let d = &cfg.data;
    let spec = match split {
        Split::Train => DatasetSpec {
            num_identities: d.num_identities,
            frames_per_identity: d.frames_per_identity,
            first_identity: 0,
            seed: cfg.seed,
        },
        Split::Eval => DatasetSpec {
            num_identities: d.eval_identities,
            frames_per_identity: d.frames_per_identity,
            first_identity: d.num_identities,
            seed: cfg.seed.wrapping_add(1),
        },
    };
    Ok(generate(&renderer, &spec)?)
}

pub fn load_dataset(path: &Path, model: &ModelConfig) -> Result<Vec<StorySequence>> {
    let renderer = renderer_for(model)?;
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening dataset {}", path.display()))?);
    read_dataset(&mut r, &renderer).with_context(|| format!("dataset {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

/// Writes the dataset and returns a manifest summary.
pub fn cmd_gen_data(cfg: &RunConfig, split: Split, out: &Path) -> Result<String> {
    let ds = split_dataset(cfg, split)?;
    let mut w = create(out)?;
    write_dataset(&mut w, &ds)?;
    w.flush()?;
    let frames: usize = ds.iter().map(|s| s.frames.len()).sum();
    let ids: Vec<String> = ds
        .iter()
        .map(|s| format!("{}:{}", s.character.identity_id, s.character.style_id))
        .collect();
    Ok(format!(
        "dataset {}\nsequences {}\nframes {}\nidentities(id:style) {}\n",
        out.display(),
        ds.len(),
        frames,
        ids.join(" ")
    ))
}

fn numerical(e: TrainError) -> anyhow::Error {
    match e {
        TrainError::NonFinite { .. } => NumericalFailure(e.to_string()).into(),
        other => other.into(),
    }
}

fn check_group_size(cfg: &RunConfig, ds: &[StorySequence]) -> Result<()> {
    if ds.iter().all(|s| s.frames.len() < cfg.group_size) {
        bail!("no identity in the dataset has group_size = {} frames", cfg.group_size);
    }
    Ok(())
}

/// Pretrains the base of a fresh model seeded by `cfg.seed` (unless
/// `pretrain_steps` is 0), freezes it and trains `Φ^c`. The GSA and control
/// runs of one config therefore share the same base.
pub fn cmd_train_stage1(
    cfg: &RunConfig,
    dataset: &Path,
    out: &Path,
    metrics: Option<&Path>,
    use_gsa: bool,
) -> Result<()> {
    let ds = load_dataset(dataset, &cfg.model)?;
    check_group_size(cfg, &ds)?;
    let mut model = Model::<f32>::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    if cfg.pretrain_steps > 0 {
        let corpus = generate(&renderer_for(&cfg.model)?, &cfg.pretrain_spec())?;
        let every = (cfg.pretrain_steps / 10).max(1);
        pretrain_base(&mut model, &corpus, &cfg.pretrain_options(), |step, loss| {
            if step % every == 0 {
                info!("base pretraining step {step} loss {loss:.5}");
            }
        })
        .map_err(numerical)?;
    }
    let mut log = match metrics {
        Some(p) => {
            let mut w = create(p)?;
            writeln!(w, "step,loss")?;
            Some(w)
        }
        None => None,
    };
    let mut io_err = None;
    let every = (cfg.stage1_steps / 20).max(1);
    train_stage1(&mut model, &ds, &cfg.stage1_options(use_gsa), |step, loss| {
        if let Some(w) = log.as_mut() {
            if let Err(e) = writeln!(w, "{step},{loss}") {
                io_err.get_or_insert(e);
            }
        }
        if step % every == 0 {
            info!("stage1 step {step} loss {loss:.5}");
        }
    })
    .map_err(numerical)?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    Checkpoint::from_model(cfg, &model).save_path(out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load_path(path).with_context(|| format!("checkpoint {}", path.display()))
}

/// Stage-2 summary: frozen-set hashes before and after, and mean accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Summary {
    pub base_hash: (String, String),
    pub phi_c_hash: (String, String),
    pub final_loss: f64,
    pub mean_accuracy: f64,
}

pub fn cmd_train_stage2(
    cfg: &RunConfig,
    dataset: &Path,
    stage1: &Path,
    out: &Path,
    metrics: Option<&Path>,
) -> Result<Stage2Summary> {
    let ck = load_checkpoint(stage1)?;
    if ck.config.model != cfg.model {
        bail!("model section of the config differs from the stage-1 checkpoint");
    }
    let ds = load_dataset(dataset, &cfg.model)?;
    check_group_size(cfg, &ds)?;
    let renderer = renderer_for(&cfg.model)?;
    let pools = build_preference_pools(&renderer, &ds, cfg.group_size, cfg.data.losers_per_mode, cfg.seed)?;
    let mut model = ck.into_model()?;
    let before = (
        set_hash(&model.adapters, AdapterSet::Base),
        set_hash(&model.adapters, AdapterSet::Consistency),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ STAGE2_SEED_SALT);
    model.adapters.begin_preference_stage(&cfg.model, &mut rng);
    let mut log = match metrics {
        Some(p) => {
            let mut w = create(p)?;
            writeln!(w, "step,loss,accuracy")?;
            Some(w)
        }
        None => None,
    };
    let mut io_err = None;
    let every = (cfg.dpo.steps / 20).max(1);
    let steps = train_stage2(&mut model, &pools, &cfg.dpo, cfg.adam, &mut rng, |s| {
        if let Some(w) = log.as_mut() {
            if let Err(e) = writeln!(w, "{},{},{}", s.step, s.loss, s.accuracy) {
                io_err.get_or_insert(e);
            }
        }
        if s.step % every == 0 {
            info!("stage2 step {} loss {:.5} acc {}", s.step, s.loss, s.accuracy);
        }
    })
    .map_err(|e| {
        if e.to_string().contains("non-finite") {
            NumericalFailure(e.to_string()).into()
        } else {
            anyhow::Error::from(e)
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    let after = (
        set_hash(&model.adapters, AdapterSet::Base),
        set_hash(&model.adapters, AdapterSet::Consistency),
    );
    Checkpoint::from_model(cfg, &model).save_path(out)?;
    let n = steps.len().max(1) as f64;
    Ok(Stage2Summary {
        base_hash: (before.0, after.0),
        phi_c_hash: (before.1, after.1),
        final_loss: steps.last().map_or(f64::NAN, |s| s.loss),
        mean_accuracy: steps.iter().map(|s| s.accuracy).sum::<f64>() / n,
    })
}

/// Parses `id:scene:style` caption triples.
pub fn parse_captions(spec: &str, text_len: usize) -> Result<Vec<Vec<usize>>> {
    spec.split(',')
        .map(|item| {
            let f: Vec<usize> = item
                .trim()
                .split(':')
                .map(|x| x.parse::<usize>().with_context(|| format!("caption `{item}`")))
                .collect::<Result<_>>()?;
            if f.len() != 3 {
                bail!("caption `{item}` must be id:scene:style");
            }
            encode_caption(f[0], f[1], f[2], text_len).with_context(|| format!("caption `{item}` out of range"))
        })
        .collect()
}

/// Binary PPM of the first three channels, upscaled, with the identity patch outlined.
pub fn latent_to_ppm(latent: &Tensor<f32>, scale: usize) -> Vec<u8> {
    let (g, c) = (latent.shape()[0], latent.shape()[2]);
    let side = g * scale;
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    let half = g / 2;
    for y in 0..side {
        for x in 0..side {
            let (r, col) = (y / scale, x / scale);
            let edge = (r < half && col < half) && (y == half * scale - 1 || x == half * scale - 1);
            for ch in 0..3 {
                let v = latent.data()[(r * g + col) * c + ch.min(c - 1)];
                let b = if edge { 255 } else { ((v + 2.5) / 5.0 * 255.0).clamp(0.0, 255.0) as u8 };
                out.push(b);
            }
        }
    }
    out
}

pub const LATENTS_MAGIC: &str = "GSAFLOW-LATENTS v1";

/// Generates one latent per caption, all conditioned on the first
/// `group_size − 1` frames of `identity` in `dataset`. Writes
/// `sample_NNN.ppm` dumps and `latents.bin` into `out_dir`.
pub fn cmd_sample(
    ckpt: &Path,
    dataset: &Path,
    identity: usize,
    captions: Option<&str>,
    sampler: &SamplerConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let ck = load_checkpoint(ckpt)?;
    let cfg = ck.config.clone();
    let ds = load_dataset(dataset, &cfg.model)?;
    let seq = ds
        .iter()
        .find(|s| s.character.identity_id == identity)
        .with_context(|| format!("identity {identity} not in {}", dataset.display()))?;
    let n_refs = cfg.group_size - 1;
    if seq.frames.len() < n_refs {
        bail!("identity {identity} has fewer than {n_refs} frames");
    }
    let refs: Vec<Tensor<f32>> = seq.frames[..n_refs].iter().map(|f| f.latent.clone()).collect();
    let caps = match captions {
        Some(s) => parse_captions(s, cfg.model.text_len)?,
        None => seq.frames[n_refs..].iter().map(|f| f.caption.clone()).collect(),
    };
    let model = ck.into_model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut latents = Vec::new();
    for (i, cap) in caps.iter().enumerate() {
        let z = euler_sample(&model, cap, &refs, sampler, &mut rng)?;
        if !z.is_finite() {
            return Err(NumericalFailure(format!("non-finite sample for caption {cap:?}")).into());
        }
        let path = out_dir.join(format!("sample_{i:03}.ppm"));
        std::fs::write(&path, latent_to_ppm(&z, 8))?;
        written.push(path);
        latents.push(z);
    }
    let path = out_dir.join("latents.bin");
    let mut w = create(&path)?;
    let s = cfg.model.latent_shape();
    writeln!(w, "{LATENTS_MAGIC}")?;
    writeln!(w, "{} {} {} {}", latents.len(), s[0], s[1], s[2])?;
    for z in &latents {
        w.write_all(&z.to_le_f32_bytes())?;
    }
    w.flush()?;
    written.push(path);
    Ok(written)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub mode: EvalMode,
    pub report: ConsistencyReport,
    pub reward_accuracy: f64,
}

pub const EVAL_HEADER: &str = "mode,cids_cross,cids_self,csd_cross,csd_self,reward_accuracy";

impl EvalRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{}",
            self.mode.name(),
            r.cids_cross,
            r.cids_self,
            r.csd_cross,
            r.csd_self,
            self.reward_accuracy
        )
    }
}

/// Consistency scores and implicit-reward accuracy on a held-out dataset.
pub fn cmd_eval(ckpt: &Path, dataset: &Path, mode: EvalMode, seed: u64, out: Option<&Path>) -> Result<EvalRow> {
    let ck = load_checkpoint(ckpt)?;
    let cfg = ck.config.clone();
    let ds = load_dataset(dataset, &cfg.model)?;
    let model = ck.into_model()?;
    let renderer = renderer_for(&cfg.model)?;
    let report = evaluate_consistency(
        &model,
        &renderer,
        &ds,
        cfg.group_size,
        &cfg.sampler,
        mode == EvalMode::WithGsa,
        seed ^ EVAL_SEED_SALT,
    )?;
    let pairs = held_out_pairs(&renderer, &ds, cfg.group_size, cfg.data.losers_per_mode, cfg.data.eval_pairs, seed)?;
    let reward_accuracy = held_out_accuracy(&model, &pairs)?;
    let row = EvalRow {
        mode,
        report,
        reward_accuracy,
    };
    if let Some(p) = out {
        let fresh = !p.exists();
        let mut w = BufWriter::new(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .with_context(|| format!("opening {}", p.display()))?,
        );
        if fresh {
            writeln!(w, "{EVAL_HEADER}")?;
        }
        writeln!(w, "{}", row.csv())?;
        w.flush()?;
    }
    Ok(row)
}

/// Finite-difference audit on a two-block version of the configured model.
pub fn cmd_grad_check(cfg: &RunConfig) -> Result<Vec<GradCheckLine>> {
    let tiny = ModelConfig {
        depth: 2,
        ..ModelConfig::tiny()
    };
    let lines = loss_gradient_report(&tiny, cfg.seed)?;
    if let Some(bad) = lines.iter().find(|l| !l.passed()) {
        return Err(NumericalFailure(format!(
            "{} gradient relative error {:.3e}",
            bad.name, bad.max_relative_error
        ))
        .into());
    }
    Ok(lines)
}
