//! Base pretraining and stage-1 consistency training of `Φ^c`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{make_group_batches, DataError, StorySequence};
use crate::flow::{
    apply_caption_dropout, interpolate, loss_flow_matching, reference_cache_on_tape, sample_timestep, standard_normal,
};
use crate::model::{AdapterFlags, AdapterSet, Model};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Real, Tape, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Options {
    pub steps: usize,
    pub adam: AdamWConfig,
    pub caption_dropout: f64,
    pub group_size: usize,
    pub seed: u64,
    /// Condition the target on its references. When off every forward runs
    /// with no cache; batches are drawn identically either way.
    pub use_gsa: bool,
}

impl Default for Stage1Options {
    fn default() -> Self {
        Stage1Options {
            steps: 20_000,
            adam: AdamWConfig::default(),
            caption_dropout: 0.1,
            group_size: 3,
            seed: 0,
            use_gsa: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: usize, loss: f64 },
}

/// Trains `Φ^c` with AdamW; the base weights stay frozen and `Φ^d` is off.
/// Calls `on_step(step, loss)` after every update.
pub fn train_stage1(
    model: &mut Model<f32>,
    dataset: &[StorySequence],
    opts: &Stage1Options,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>, TrainError> {
    if !(0.0..=1.0).contains(&opts.caption_dropout) {
        return Err(DataError::Invalid(format!("caption dropout {} outside [0, 1]", opts.caption_dropout)).into());
    }
    model.adapters.active = AdapterFlags::CONSISTENCY;
    model.adapters.trainable = AdapterFlags::CONSISTENCY;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let batch_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut batches = make_group_batches(dataset, opts.group_size, batch_rng)?;
    let mut opt = AdamW::new(opts.adam, model.adapters.set(AdapterSet::Consistency));
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let batch = batches.next().expect("endless stream");
        let caption = apply_caption_dropout(&batch.condition, opts.caption_dropout, &mut rng);
        let mut tape = Tape::new();
        let params = model.bind(&mut tape);
        let cache = if opts.use_gsa {
            reference_cache_on_tape(model, &mut tape, &params, &batch.references)?
        } else {
            None
        };
        let loss = loss_flow_matching(model, &mut tape, &params, &batch.target, &caption, cache.as_ref())?;
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(TrainError::NonFinite { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        let vars = params.phi_c.as_ref().expect("phi_c bound");
        let g: Vec<_> = vars.iter().map(|&v| grads.get(v)).collect();
        opt.step(model.adapters.set_mut(AdapterSet::Consistency), &g)?;
        on_step(step, value);
        losses.push(value);
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOptions {
    pub steps: usize,
    pub adam: AdamWConfig,
    pub caption_dropout: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            steps: 4000,
            adam: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
            caption_dropout: 0.1,
            seed: 0,
        }
    }
}

/// Single-image flow matching of the base weights `Φ`, run before they are
/// frozen. It stands in for the pretrained backbone the adapters sit on:
/// without it the frozen random blocks emit large arbitrary velocities and
/// stage 1 spends its budget cancelling them. No references and no adapters
/// take part, and the adapter flags are left as they were.
pub fn pretrain_base(
    model: &mut Model<f32>,
    dataset: &[StorySequence],
    opts: &PretrainOptions,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>, TrainError> {
    if !(0.0..=1.0).contains(&opts.caption_dropout) {
        return Err(DataError::Invalid(format!("caption dropout {} outside [0, 1]", opts.caption_dropout)).into());
    }
    let frames: Vec<_> = dataset.iter().flat_map(|s| &s.frames).collect();
    if frames.is_empty() {
        return Err(DataError::Invalid("pretraining corpus is empty".into()).into());
    }
    let shape = model.config.latent_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = AdamW::new(opts.adam, &model.adapters.base);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let frame = frames[rng.random_range(0..frames.len())];
        let eps = standard_normal(&shape, &mut rng);
        let sample = interpolate(&frame.latent, &eps, sample_timestep(&mut rng))?;
        let caption = apply_caption_dropout(&frame.caption, opts.caption_dropout, &mut rng);
        let mut tape = Tape::new();
        let vars: Vec<Var> = model.adapters.base.iter().map(|t| tape.param(t.clone())).collect();
        let params = model
            .adapters
            .bind_overriding(&mut tape, AdapterFlags::NONE, AdapterSet::Base, &vars)?;
        let loss = loss_flow_matching(model, &mut tape, &params, &sample, &caption, None)?;
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(TrainError::NonFinite { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        let g: Vec<_> = vars.iter().map(|&v| grads.get(v)).collect();
        opt.step(&mut model.adapters.base, &g)?;
        on_step(step, value);
        losses.push(value);
    }
    Ok(losses)
}
