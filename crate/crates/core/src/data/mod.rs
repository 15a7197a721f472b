//! Synthetic identity-labelled story dataset and toy consistency metrics.
//!
//! Frames are built directly in the model's latent geometry. The top-left
//! quadrant of every latent is the *identity patch*: a fixed rendering of the
//! character's identity code, scaled per channel by the style palette. The
//! rest of the latent renders the scene.

mod caption;
pub mod format;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub use caption::{
    decode_caption, encode_caption, null_caption, CAPTION_MIN_LEN, CAPTION_VOCAB, MAX_IDENTITIES, MAX_SCENES,
    MAX_STYLES, NULL_TOKEN,
};

use crate::dpo::PreferencePool;
use crate::flow::{interpolate, sample_timestep, standard_normal, GroupBatch};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

const BASIS_SEED: u64 = 0x1d_e47_17e5;
const CODE_SEED: u64 = 0xc0de_5eed;
const STYLE_SEED: u64 = 0x57_11e5;
const SCENE_SEED: u64 = 0x5ce_9e55;
/// Pairwise cosine bound between identity codes. Tighter than the 0.9 the
/// rendered patches must satisfy, leaving room for the style gains.
const CODE_COSINE_BOUND: f64 = 0.8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset request: {0}")]
    Invalid(String),
    #[error("unknown corruption mode `{0}` (expected identity-swap, noise-inject or patch-scramble)")]
    UnknownMode(String),
    #[error("could not construct a loser ranked below its winner after {0} attempts")]
    LoserRejected(usize),
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Geometry and vocabulary of generated frames.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub latent_grid: usize,
    pub latent_channels: usize,
    pub identity_dim: usize,
    pub num_styles: usize,
    pub text_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            latent_grid: 8,
            latent_channels: 4,
            identity_dim: 8,
            num_styles: 4,
            text_len: 8,
        }
    }
}

impl DataConfig {
    pub fn for_model(cfg: &ModelConfig) -> Self {
        DataConfig {
            latent_grid: cfg.latent_grid,
            latent_channels: cfg.latent_channels,
            text_len: cfg.text_len,
            ..DataConfig::default()
        }
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_grid, self.latent_grid, self.latent_channels]
    }

    pub fn latent_len(&self) -> usize {
        self.latent_grid * self.latent_grid * self.latent_channels
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.latent_grid < 2 || self.latent_grid % 2 != 0 {
            return Err(DataError::Invalid(format!("latent_grid {} must be even", self.latent_grid)));
        }
        if self.latent_channels == 0 || self.identity_dim == 0 {
            return Err(DataError::Invalid("latent_channels and identity_dim must be positive".into()));
        }
        if self.identity_dim > identity_region(self).len() {
            return Err(DataError::Invalid("identity_dim exceeds the identity patch size".into()));
        }
        if self.num_styles == 0 || self.num_styles > MAX_STYLES {
            return Err(DataError::Invalid(format!("num_styles must be in 1..={MAX_STYLES}")));
        }
        if self.text_len < CAPTION_MIN_LEN {
            return Err(DataError::Invalid(format!("text_len must be at least {CAPTION_MIN_LEN}")));
        }
        Ok(())
    }
}

/// Flat indices of the identity patch (top-left quadrant), ordered
/// row, column, channel.
pub fn identity_region(cfg: &DataConfig) -> Vec<usize> {
    let (g, c) = (cfg.latent_grid, cfg.latent_channels);
    let half = g / 2;
    let mut out = Vec::with_capacity(half * half * c);
    for r in 0..half {
        for col in 0..half {
            for ch in 0..c {
                out.push((r * g + col) * c + ch);
            }
        }
    }
    out
}

fn in_identity_region(cfg: &DataConfig, row: usize, col: usize) -> bool {
    row < cfg.latent_grid / 2 && col < cfg.latent_grid / 2
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CharacterSpec {
    pub identity_id: usize,
    pub identity_code: Vec<f64>,
    pub style_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoryFrame {
    pub latent: Tensor<f32>,
    pub caption: Vec<usize>,
    pub scene_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StorySequence {
    pub character: CharacterSpec,
    pub frames: Vec<StoryFrame>,
}

#[derive(Clone, Debug)]
struct SceneParams {
    row_freq: f64,
    col_freq: f64,
    phase: Vec<f64>,
}

/// Deterministic renderer for identity patches and scenes.
#[derive(Clone, Debug)]
pub struct Renderer {
    cfg: DataConfig,
    region: Vec<usize>,
    /// `region.len() × identity_dim`, orthonormal columns.
    basis: Vec<f64>,
    codes: Vec<Vec<f64>>,
    style_gains: Vec<Vec<f64>>,
    scenes: Vec<SceneParams>,
}

impl Renderer {
    pub fn new(cfg: &DataConfig) -> Result<Self, DataError> {
        cfg.validate()?;
        let region = identity_region(cfg);
        let (p, k) = (region.len(), cfg.identity_dim);

        let mut rng = ChaCha8Rng::seed_from_u64(BASIS_SEED ^ (p as u64) << 16 ^ k as u64);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
        while cols.len() < k {
            let mut v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(c) {
                    *x -= d * y;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                cols.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let mut basis = vec![0.0; p * k];
        for (j, c) in cols.iter().enumerate() {
            for i in 0..p {
                basis[i * k + j] = c[i];
            }
        }

        // Identity codes: a pure function of the id, each rejection-sampled
        // against every smaller id.
        let mut codes: Vec<Vec<f64>> = Vec::with_capacity(MAX_IDENTITIES);
        for id in 0..MAX_IDENTITIES {
            let mut rng = ChaCha8Rng::seed_from_u64(CODE_SEED.wrapping_add(id as u64 * 7919));
            loop {
                let cand: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
                let ok = cosine(&cand, &cand).is_some()
                    && codes
                        .iter()
                        .all(|c| cosine(&cand, c).is_some_and(|s| s < CODE_COSINE_BOUND));
                if ok {
                    codes.push(cand);
                    break;
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(STYLE_SEED);
        let style_gains = (0..MAX_STYLES)
            .map(|_| (0..cfg.latent_channels).map(|_| rng.random_range(0.75..1.25)).collect())
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(SCENE_SEED);
        let scenes = (0..MAX_SCENES)
            .map(|_| SceneParams {
                row_freq: rng.random_range(0.3..1.6),
                col_freq: rng.random_range(0.3..1.6),
                phase: (0..cfg.latent_channels)
                    .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                    .collect(),
            })
            .collect();

        Ok(Renderer {
            cfg: cfg.clone(),
            region,
            basis,
            codes,
            style_gains,
            scenes,
        })
    }

    pub fn config(&self) -> &DataConfig {
        &self.cfg
    }

    pub fn region(&self) -> &[usize] {
        &self.region
    }

    pub fn identity_code(&self, identity_id: usize) -> &[f64] {
        &self.codes[identity_id]
    }

    pub fn character(&self, identity_id: usize, style_id: usize) -> CharacterSpec {
        CharacterSpec {
            identity_id,
            identity_code: self.codes[identity_id].clone(),
            style_id,
        }
    }

    /// Identity patch values in region order, RMS 1 before styling.
    pub fn identity_patch(&self, identity_id: usize, style_id: usize) -> Vec<f64> {
        let k = self.cfg.identity_dim;
        let code = &self.codes[identity_id];
        let norm = code.iter().map(|x| x * x).sum::<f64>().sqrt();
        let gain = (self.region.len() as f64).sqrt() / norm;
        let c = self.cfg.latent_channels;
        (0..self.region.len())
            .map(|i| {
                let v: f64 = (0..k).map(|j| self.basis[i * k + j] * code[j]).sum();
                v * gain * self.style_gains[style_id][i % c]
            })
            .collect()
    }

    fn scene_value(&self, scene_id: usize, row: usize, col: usize, ch: usize) -> f64 {
        let s = &self.scenes[scene_id];
        std::f64::consts::SQRT_2 * (s.row_freq * row as f64 + s.col_freq * col as f64 + s.phase[ch]).sin()
    }

    pub fn render(&self, identity_id: usize, scene_id: usize, style_id: usize) -> Tensor<f32> {
        let (g, c) = (self.cfg.latent_grid, self.cfg.latent_channels);
        let mut data = vec![0f32; self.cfg.latent_len()];
        for row in 0..g {
            for col in 0..g {
                if in_identity_region(&self.cfg, row, col) {
                    continue;
                }
                for ch in 0..c {
                    data[(row * g + col) * c + ch] = self.scene_value(scene_id, row, col, ch) as f32;
                }
            }
        }
        for (&idx, v) in self.region.iter().zip(self.identity_patch(identity_id, style_id)) {
            data[idx] = v as f32;
        }
        Tensor::new(self.cfg.latent_shape().to_vec(), data).expect("latent shape")
    }

    pub fn frame(&self, identity_id: usize, scene_id: usize, style_id: usize) -> StoryFrame {
        StoryFrame {
            latent: self.render(identity_id, scene_id, style_id),
            caption: encode_caption(identity_id, scene_id, style_id, self.cfg.text_len).expect("fields in range"),
            scene_id,
        }
    }
}

/// Which identities and how many frames to generate.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_identities: usize,
    pub frames_per_identity: usize,
    /// Identity id of the first sequence; ids are consecutive from here.
    pub first_identity: usize,
    pub seed: u64,
}

/// Generates `num_identities` sequences of `frames_per_identity` frames with
/// identity ids `0..num_identities`.
pub fn generate_dataset(
    num_identities: usize,
    frames_per_identity: usize,
    seed: u64,
) -> Result<Vec<StorySequence>, DataError> {
    let renderer = Renderer::new(&DataConfig::default())?;
    generate(
        &renderer,
        &DatasetSpec {
            num_identities,
            frames_per_identity,
            first_identity: 0,
            seed,
        },
    )
}

pub fn generate(renderer: &Renderer, spec: &DatasetSpec) -> Result<Vec<StorySequence>, DataError> {
    if spec.num_identities < 2 {
        return Err(DataError::Invalid(format!("need at least 2 identities, got {}", spec.num_identities)));
    }
    if spec.frames_per_identity < 4 || spec.frames_per_identity > MAX_SCENES {
        return Err(DataError::Invalid(format!(
            "frames_per_identity must be in 4..={MAX_SCENES}, got {}",
            spec.frames_per_identity
        )));
    }
    if spec.first_identity + spec.num_identities > MAX_IDENTITIES {
        return Err(DataError::Invalid(format!("identity ids must stay below {MAX_IDENTITIES}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.num_identities);
    for id in spec.first_identity..spec.first_identity + spec.num_identities {
        let style = rng.random_range(0..renderer.cfg.num_styles);
        let mut scenes: Vec<usize> = (0..MAX_SCENES).collect();
        scenes.shuffle(&mut rng);
        let frames = scenes[..spec.frames_per_identity]
            .iter()
            .map(|&scene| renderer.frame(id, scene, style))
            .collect();
        out.push(StorySequence {
            character: renderer.character(id, style),
            frames,
        });
    }
    Ok(out)
}

/// Infinite stream of group batches drawn from `dataset`.
///
/// Each batch samples an identity uniformly among those with at least
/// `group_size` frames, then `group_size` distinct frames; the first becomes
/// the noised target, the rest the clean references.
pub struct GroupBatches<'a, R> {
    dataset: &'a [StorySequence],
    eligible: Vec<usize>,
    group_size: usize,
    rng: R,
}

pub fn make_group_batches<R: Rng>(
    dataset: &[StorySequence],
    group_size: usize,
    rng: R,
) -> Result<GroupBatches<'_, R>, DataError> {
    if group_size < 2 {
        return Err(DataError::Invalid(format!("group size must be at least 2, got {group_size}")));
    }
    let mut eligible = Vec::new();
    for (i, seq) in dataset.iter().enumerate() {
        if seq.frames.len() >= group_size {
            eligible.push(i);
        } else {
            warn!(
                "identity {} has {} frames, fewer than group size {group_size}; skipped",
                seq.character.identity_id,
                seq.frames.len()
            );
        }
    }
    if eligible.is_empty() {
        return Err(DataError::Invalid(format!("no identity has {group_size} frames")));
    }
    Ok(GroupBatches {
        dataset,
        eligible,
        group_size,
        rng,
    })
}

impl<R: Rng> Iterator for GroupBatches<'_, R> {
    type Item = GroupBatch<f32>;

    fn next(&mut self) -> Option<GroupBatch<f32>> {
        let seq = &self.dataset[self.eligible[self.rng.random_range(0..self.eligible.len())]];
        let mut idx: Vec<usize> = (0..seq.frames.len()).collect();
        let (chosen, _) = idx.partial_shuffle(&mut self.rng, self.group_size);
        let target = &seq.frames[chosen[0]];
        let references = chosen[1..].iter().map(|&i| seq.frames[i].latent.clone()).collect();
        let t = sample_timestep(&mut self.rng);
        let eps = standard_normal(target.latent.shape(), &mut self.rng);
        let sample = interpolate(&target.latent, &eps, t).expect("same shape");
        Some(GroupBatch {
            target: sample,
            references,
            condition: target.caption.clone(),
            identity_id: seq.character.identity_id,
        })
    }
}

/// How a loser is derived from a ground-truth frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Corruption {
    /// Replace the identity patch with another identity's rendering.
    IdentitySwap,
    /// Add `N(0, sigma²)` to the identity patch.
    NoiseInject { sigma: f64 },
    /// Permute the rows of the identity patch.
    PatchScramble,
}

impl Corruption {
    pub const DEFAULT_NOISE_SIGMA: f64 = 0.5;

    pub fn all() -> [Corruption; 3] {
        [
            Corruption::IdentitySwap,
            Corruption::NoiseInject {
                sigma: Self::DEFAULT_NOISE_SIGMA,
            },
            Corruption::PatchScramble,
        ]
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "identity-swap" => Ok(Corruption::IdentitySwap),
            "noise-inject" => Ok(Corruption::NoiseInject {
                sigma: Self::DEFAULT_NOISE_SIGMA,
            }),
            "patch-scramble" => Ok(Corruption::PatchScramble),
            other => Err(DataError::UnknownMode(other.to_string())),
        }
    }
}

/// Applies `mode` to the identity patch of `frame`; the scene region is untouched.
pub fn corrupt_to_loser(renderer: &Renderer, frame: &StoryFrame, mode: Corruption, rng: &mut impl Rng) -> Tensor<f32> {
    let cfg = &renderer.cfg;
    let mut out = frame.latent.clone();
    let region = &renderer.region;
    match mode {
        Corruption::IdentitySwap => {
            let (own, _, style) = decode_caption(&frame.caption).unwrap_or((usize::MAX, 0, 0));
            let other = loop {
                let id = rng.random_range(0..MAX_IDENTITIES);
                if id != own {
                    break id;
                }
            };
            let data = out.data_mut();
            for (&idx, v) in region.iter().zip(renderer.identity_patch(other, style)) {
                data[idx] = v as f32;
            }
        }
        Corruption::NoiseInject { sigma } => {
            let data = out.data_mut();
            for &idx in region {
                let g: f64 = rng.sample(StandardNormal);
                data[idx] = (data[idx] as f64 + sigma * g) as f32;
            }
        }
        Corruption::PatchScramble => {
            let half = cfg.latent_grid / 2;
            let mut perm: Vec<usize> = (0..half).collect();
            while perm.iter().enumerate().all(|(i, &p)| i == p) {
                perm.shuffle(rng);
            }
            let src = frame.latent.data();
            let data = out.data_mut();
            let (g, c) = (cfg.latent_grid, cfg.latent_channels);
            for (r, &from) in perm.iter().enumerate() {
                for col in 0..half {
                    for ch in 0..c {
                        data[(r * g + col) * c + ch] = src[(from * g + col) * c + ch];
                    }
                }
            }
        }
    }
    out
}

/// A loser ranked strictly below `frame` by identity score against
/// `reference`, resampled until it is.
pub fn make_loser(
    renderer: &Renderer,
    frame: &StoryFrame,
    reference: &Tensor<f32>,
    mode: Corruption,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>, DataError> {
    const ATTEMPTS: usize = 64;
    let winner_score = toy_identity_score(renderer, &frame.latent, reference);
    for _ in 0..ATTEMPTS {
        let loser = corrupt_to_loser(renderer, frame, mode, rng);
        if toy_identity_score(renderer, &loser, reference) < winner_score {
            return Ok(loser);
        }
    }
    Err(DataError::LoserRejected(ATTEMPTS))
}

fn region_values(renderer: &Renderer, x: &Tensor<f32>) -> Vec<f64> {
    renderer.region.iter().map(|&i| x.data()[i] as f64).collect()
}

/// Cosine similarity of the identity patches of two latents.
/// A zero-norm patch scores 0.
pub fn toy_identity_score(renderer: &Renderer, generated: &Tensor<f32>, reference: &Tensor<f32>) -> f64 {
    assert_eq!(generated.shape(), reference.shape(), "toy_identity_score shape mismatch");
    cosine(&region_values(renderer, generated), &region_values(renderer, reference)).unwrap_or_else(|| {
        warn!("identity patch with zero norm; score defined as 0");
        0.0
    })
}

/// Per-channel mean and variance, concatenated.
pub fn style_signature(x: &Tensor<f32>) -> Vec<f64> {
    let c = x.cols();
    let n = x.rows() as f64;
    let mut mean = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64 / n;
        }
    }
    let mut var = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v as f64 - m).powi(2) / n;
        }
    }
    mean.extend(var);
    mean
}

/// Cosine similarity of the per-channel style signatures of two latents.
pub fn toy_style_score(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "toy_style_score shape mismatch");
    cosine(&style_signature(a), &style_signature(b)).unwrap_or_else(|| {
        warn!("style signature with zero norm; score defined as 0");
        0.0
    })
}

/// Mean score of every generated latent against every reference.
pub fn cross_score(generated: &[Tensor<f32>], references: &[Tensor<f32>], score: impl Fn(&Tensor<f32>, &Tensor<f32>) -> f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for g in generated {
        for r in references {
            total += score(g, r);
            n += 1;
        }
    }
    if n == 0 { 0.0 } else { total / n as f64 }
}

/// Mean pairwise score within a generated sequence.
pub fn self_score(generated: &[Tensor<f32>], score: impl Fn(&Tensor<f32>, &Tensor<f32>) -> f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..generated.len() {
        for j in i + 1..generated.len() {
            total += score(&generated[i], &generated[j]);
            n += 1;
        }
    }
    if n == 0 { 0.0 } else { total / n as f64 }
}

/// Preference pools, one per (sequence, frame) scenario.
///
/// Condition and references come from the sequence (the `group_size − 1`
/// frames following the target, cyclically). The winner is the ground-truth
/// frame; losers are `losers_per_mode` corruptions of it under each mode,
/// each ranked below the winner against the first reference.
pub fn build_preference_pools(
    renderer: &Renderer,
    dataset: &[StorySequence],
    group_size: usize,
    losers_per_mode: usize,
    seed: u64,
) -> Result<Vec<PreferencePool>, DataError> {
    if group_size < 2 {
        return Err(DataError::Invalid("preference pools need at least one reference".into()));
    }
    if losers_per_mode == 0 {
        return Err(DataError::Invalid("losers_per_mode must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools = Vec::new();
    for seq in dataset {
        let n = seq.frames.len();
        if n < group_size {
            warn!("identity {} too short for preference pools; skipped", seq.character.identity_id);
            continue;
        }
        for (i, frame) in seq.frames.iter().enumerate() {
            let references: Vec<Tensor<f32>> = (1..group_size).map(|k| seq.frames[(i + k) % n].latent.clone()).collect();
            let mut losers = Vec::new();
            for mode in Corruption::all() {
                for _ in 0..losers_per_mode {
                    losers.push(make_loser(renderer, frame, &references[0], mode, &mut rng)?);
                }
            }
            pools.push(PreferencePool {
                scenario_id: pools.len(),
                condition: frame.caption.clone(),
                references,
                winners: vec![frame.latent.clone()],
                losers,
            });
        }
    }
    Ok(pools)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_pure_and_separated() {
        let a = Renderer::new(&DataConfig::default()).unwrap();
        let b = Renderer::new(&DataConfig::default()).unwrap();
        assert_eq!(a.identity_code(17), b.identity_code(17));
        for i in 0..40 {
            for j in 0..i {
                assert!(cosine(a.identity_code(i), a.identity_code(j)).unwrap() < 0.9);
            }
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = generate_dataset(2, 4, 7).unwrap();
        let b = generate_dataset(2, 4, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(2, 4, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_counts_are_rejected() {
        assert!(generate_dataset(1, 4, 0).is_err());
        assert!(generate_dataset(2, 3, 0).is_err());
    }

    #[test]
    fn frames_share_identity_patch_and_differ_in_scene() {
        let r = Renderer::new(&DataConfig::default()).unwrap();
        let ds = generate(&r, &DatasetSpec { num_identities: 3, frames_per_identity: 6, first_identity: 0, seed: 1 }).unwrap();
        for seq in &ds {
            let first = region_values(&r, &seq.frames[0].latent);
            let mut scenes = std::collections::HashSet::new();
            for f in &seq.frames {
                assert_eq!(region_values(&r, &f.latent), first);
                assert!(scenes.insert(f.scene_id));
                let (id, scene, style) = decode_caption(&f.caption).unwrap();
                assert_eq!((id, scene, style), (seq.character.identity_id, f.scene_id, seq.character.style_id));
            }
        }
    }

    #[test]
    fn scores_of_identical_and_negated() {
        let r = Renderer::new(&DataConfig::default()).unwrap();
        let x = r.render(3, 2, 1);
        assert!((toy_identity_score(&r, &x, &x) - 1.0).abs() < 1e-12);
        assert!((toy_identity_score(&r, &x, &x.scale(-1.0)) + 1.0).abs() < 1e-12);
        assert!((toy_style_score(&x, &x) - 1.0).abs() < 1e-12);
        let zero = Tensor::<f32>::zeros(x.shape().to_vec());
        assert_eq!(toy_identity_score(&r, &zero, &x), 0.0);
    }

    #[test]
    fn corruption_modes() {
        let r = Renderer::new(&DataConfig::default()).unwrap();
        let frame = r.frame(5, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let same = corrupt_to_loser(&r, &frame, Corruption::NoiseInject { sigma: 0.0 }, &mut rng);
        assert_eq!(same, frame.latent);

        let scrambled = corrupt_to_loser(&r, &frame, Corruption::PatchScramble, &mut rng);
        let mut a: Vec<u32> = region_values(&r, &frame.latent).iter().map(|&v| (v as f32).to_bits()).collect();
        let mut b: Vec<u32> = region_values(&r, &scrambled).iter().map(|&v| (v as f32).to_bits()).collect();
        assert_ne!(a, b);
        a.sort();
        b.sort();
        assert_eq!(a, b);

        for mode in Corruption::all() {
            let loser = corrupt_to_loser(&r, &frame, mode, &mut rng);
            for (i, (x, y)) in loser.data().iter().zip(frame.latent.data()).enumerate() {
                if !r.region().contains(&i) {
                    assert_eq!(x, y, "scene region changed by {mode:?}");
                }
            }
        }
        assert!(matches!(Corruption::parse("blur"), Err(DataError::UnknownMode(_))));
    }
}
