//! Consistency evaluation on held-out identities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    build_preference_pools, cross_score, self_score, toy_identity_score, toy_style_score, DataError, Renderer,
    StorySequence,
};
use crate::dpo::{implicit_reward_accuracy, sample_pair, PreferencePair};
use crate::flow::{euler_sample, SamplerConfig};
use crate::model::Model;
use crate::tensor::{Tensor, TensorError};

/// Toy analogs of the identity (CIDS) and style (CSD) scores, each as
/// generated-vs-reference ("cross") and within-generated ("self") means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub cids_cross: f64,
    pub cids_self: f64,
    pub csd_cross: f64,
    pub csd_self: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Generated frames of one sequence alongside the references they saw.
pub struct GeneratedSequence {
    pub identity_id: usize,
    pub references: Vec<Tensor<f32>>,
    pub generated: Vec<Tensor<f32>>,
}

/// For each sequence, the first `group_size − 1` frames are the references
/// and every remaining frame's caption is generated. Without GSA every
/// sample runs with no cache. The noise stream depends only on `seed`.
pub fn generate_sequences(
    model: &Model<f32>,
    sequences: &[StorySequence],
    group_size: usize,
    sampler: &SamplerConfig,
    use_gsa: bool,
    seed: u64,
) -> Result<Vec<GeneratedSequence>, EvalError> {
    let n_refs = group_size.saturating_sub(1).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(sequences.len());
    for seq in sequences {
        if seq.frames.len() <= n_refs + 1 {
            return Err(DataError::Invalid(format!(
                "identity {} has {} frames; need more than {} for evaluation",
                seq.character.identity_id,
                seq.frames.len(),
                n_refs + 1
            ))
            .into());
        }
        let references: Vec<Tensor<f32>> = seq.frames[..n_refs].iter().map(|f| f.latent.clone()).collect();
        let refs: &[Tensor<f32>] = if use_gsa { &references } else { &[] };
        let generated = seq.frames[n_refs..]
            .iter()
            .map(|f| euler_sample(model, &f.caption, refs, sampler, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(GeneratedSequence {
            identity_id: seq.character.identity_id,
            references,
            generated,
        });
    }
    Ok(out)
}

/// Averages the four scores over sequences.
pub fn score_sequences(renderer: &Renderer, generated: &[GeneratedSequence]) -> ConsistencyReport {
    let n = generated.len().max(1) as f64;
    let mut r = ConsistencyReport {
        cids_cross: 0.0,
        cids_self: 0.0,
        csd_cross: 0.0,
        csd_self: 0.0,
    };
    let id = |a: &Tensor<f32>, b: &Tensor<f32>| toy_identity_score(renderer, a, b);
    for g in generated {
        r.cids_cross += cross_score(&g.generated, &g.references, id) / n;
        r.cids_self += self_score(&g.generated, id) / n;
        r.csd_cross += cross_score(&g.generated, &g.references, toy_style_score) / n;
        r.csd_self += self_score(&g.generated, toy_style_score) / n;
    }
    r
}

pub fn evaluate_consistency(
    model: &Model<f32>,
    renderer: &Renderer,
    sequences: &[StorySequence],
    group_size: usize,
    sampler: &SamplerConfig,
    use_gsa: bool,
    seed: u64,
) -> Result<ConsistencyReport, EvalError> {
    let g = generate_sequences(model, sequences, group_size, sampler, use_gsa, seed)?;
    Ok(score_sequences(renderer, &g))
}

/// A fixed set of `count` preference pairs drawn from pools built on `sequences`.
pub fn held_out_pairs(
    renderer: &Renderer,
    sequences: &[StorySequence],
    group_size: usize,
    losers_per_mode: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PreferencePair<f32>>, EvalError> {
    let pools = build_preference_pools(renderer, sequences, group_size, losers_per_mode, seed)?;
    if pools.is_empty() {
        return Err(DataError::Invalid("no preference pools for evaluation".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9a125);
    (0..count)
        .map(|i| Ok(sample_pair(&pools[i % pools.len()], &mut rng)?))
        .collect()
}

pub fn held_out_accuracy(model: &Model<f32>, pairs: &[PreferencePair<f32>]) -> Result<f64, EvalError> {
    Ok(implicit_reward_accuracy(model, pairs)?)
}
