//! Flow-matching preference optimization of the `Φ^d` adapter.
//!
//! The implicit reward of an image is the drop in velocity-matching error
//! from the reference policy (`Φ + Φ^c`) to the current policy
//! (`Φ + Φ^c + Φ^d`). Both policies share weights; the reference policy is
//! obtained by deactivating `Φ^d`.

use rand::Rng;

use crate::flow::{interpolate, loss_flow_matching, reference_cache_on_tape, sample_timestep, standard_normal};
use crate::model::{AdapterFlags, AdapterSet, Bound, CacheVars, Model};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Real, Result, Tape, Tensor, TensorError, Var};

/// Comparable candidates for one scenario: same condition and references.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePool<T = f32> {
    pub scenario_id: usize,
    pub condition: Vec<usize>,
    pub references: Vec<Tensor<T>>,
    pub winners: Vec<Tensor<T>>,
    pub losers: Vec<Tensor<T>>,
}

/// One winner/loser pair with its shared timestep and per-image noise.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair<T = f32> {
    pub condition: Vec<usize>,
    pub references: Vec<Tensor<T>>,
    pub winner: Tensor<T>,
    pub loser: Tensor<T>,
    pub t: f64,
    pub eps_w: Tensor<T>,
    pub eps_l: Tensor<T>,
    /// Indices into the pool's winner and loser lists.
    pub picked: (usize, usize),
}

impl<T: Real> PreferencePair<T> {
    pub fn cast<U: Real>(&self) -> PreferencePair<U> {
        PreferencePair {
            condition: self.condition.clone(),
            references: self.references.iter().map(|r| r.cast()).collect(),
            winner: self.winner.cast(),
            loser: self.loser.cast(),
            t: self.t,
            eps_w: self.eps_w.cast(),
            eps_l: self.eps_l.cast(),
            picked: self.picked,
        }
    }

    /// The same pair with winner and loser exchanged.
    pub fn swapped(&self) -> Self {
        PreferencePair {
            winner: self.loser.clone(),
            loser: self.winner.clone(),
            eps_w: self.eps_l.clone(),
            eps_l: self.eps_w.clone(),
            picked: (self.picked.1, self.picked.0),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 1800.0,
            learning_rate: 5e-6,
            steps: 2000,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(TensorError::contract("dpo", format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TensorError::contract("dpo", format!("learning rate {} invalid", self.learning_rate)));
        }
        Ok(())
    }
}

/// Uniform draw over `winners × losers`, one shared `t`, fresh noise per image.
pub fn sample_pair<T: Real>(pool: &PreferencePool<T>, rng: &mut impl Rng) -> Result<PreferencePair<T>> {
    if pool.winners.is_empty() || pool.losers.is_empty() {
        return Err(TensorError::contract(
            "sample_pair",
            format!("pool {} has {} winners and {} losers", pool.scenario_id, pool.winners.len(), pool.losers.len()),
        ));
    }
    let w = rng.random_range(0..pool.winners.len());
    let l = rng.random_range(0..pool.losers.len());
    let t = sample_timestep(rng);
    let winner = pool.winners[w].clone();
    let loser = pool.losers[l].clone();
    let eps_w = standard_normal(winner.shape(), rng);
    let eps_l = standard_normal(loser.shape(), rng);
    Ok(PreferencePair {
        condition: pool.condition.clone(),
        references: pool.references.clone(),
        winner,
        loser,
        t,
        eps_w,
        eps_l,
        picked: (w, l),
    })
}

/// The reference policy of `theta`: the same variables with `Φ^d` off.
pub fn reference_policy(theta: &Bound) -> Bound {
    Bound {
        phi_d: None,
        ..theta.clone()
    }
}

/// Binds the model for stage 2: both sets active, only `Φ^d` trainable.
pub fn bind_policy<T: Real>(model: &Model<T>, tape: &mut Tape<T>) -> Bound {
    model.adapters.bind_as(tape, AdapterFlags::BOTH, AdapterFlags::PREFERENCE)
}

/// Reference caches of one pair under the current and reference policies.
pub struct PairCaches {
    pub theta: Option<CacheVars>,
    pub reference: Option<CacheVars>,
}

pub fn pair_caches<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    theta: &Bound,
    references: &[Tensor<T>],
) -> Result<PairCaches> {
    Ok(PairCaches {
        theta: reference_cache_on_tape(model, tape, theta, references)?,
        reference: reference_cache_on_tape(model, tape, &reference_policy(theta), references)?,
    })
}

/// Mean squared velocity error of `policy` on `image` noised with `eps` at `t`.
#[allow(clippy::too_many_arguments)]
pub fn matching_error<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    policy: &Bound,
    image: &Tensor<T>,
    eps: &Tensor<T>,
    t: f64,
    condition: &[usize],
    cache: Option<&CacheVars>,
) -> Result<Var> {
    let sample = interpolate(image, eps, t)?;
    loss_flow_matching(model, tape, policy, &sample, condition, cache)
}

/// `err_ref − err_θ` on the same `z_t`, `t`, condition and references.
#[allow(clippy::too_many_arguments)]
pub fn log_ratio<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    theta: &Bound,
    caches: &PairCaches,
    image: &Tensor<T>,
    eps: &Tensor<T>,
    t: f64,
    condition: &[usize],
) -> Result<Var> {
    let reference = reference_policy(theta);
    let err_ref = matching_error(model, tape, &reference, image, eps, t, condition, caches.reference.as_ref())?;
    let err_theta = matching_error(model, tape, theta, image, eps, t, condition, caches.theta.as_ref())?;
    tape.sub(err_ref, err_theta)
}

/// `log_ratio(I_w) − log_ratio(I_l)`, before scaling by β.
pub fn reward_margin<T: Real>(model: &Model<T>, tape: &mut Tape<T>, theta: &Bound, pair: &PreferencePair<T>) -> Result<Var> {
    let caches = pair_caches(model, tape, theta, &pair.references)?;
    let w = log_ratio(model, tape, theta, &caches, &pair.winner, &pair.eps_w, pair.t, &pair.condition)?;
    let l = log_ratio(model, tape, theta, &caches, &pair.loser, &pair.eps_l, pair.t, &pair.condition)?;
    tape.sub(w, l)
}

/// `−log σ(β · margin)` for one pair.
pub fn loss_dpo<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    theta: &Bound,
    pair: &PreferencePair<T>,
    beta: f64,
) -> Result<Var> {
    let margin = reward_margin(model, tape, theta, pair)?;
    let logit = tape.scale(margin, T::lit(beta));
    let ls = tape.log_sigmoid(logit);
    Ok(tape.scale(ls, T::lit(-1.0)))
}

/// Value-level margin with no gradient tracking.
pub fn margin_value<T: Real>(model: &Model<T>, pair: &PreferencePair<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let theta = model.adapters.bind_as(&mut tape, AdapterFlags::BOTH, AdapterFlags::NONE);
    let m = reward_margin(model, &mut tape, &theta, pair)?;
    Ok(tape.value(m).item().as_f64())
}

fn margin_score(m: f64) -> f64 {
    if m > 0.0 {
        1.0
    } else if m == 0.0 {
        0.5
    } else {
        0.0
    }
}

/// Fraction of pairs whose winner earns the larger implicit reward; ties count 0.5.
pub fn implicit_reward_accuracy<T: Real>(model: &Model<T>, pairs: &[PreferencePair<T>]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(TensorError::contract("implicit_reward_accuracy", "no pairs"));
    }
    let mut total = 0.0;
    for p in pairs {
        total += margin_score(margin_value(model, p)?);
    }
    Ok(total / pairs.len() as f64)
}

/// Per-step stage-2 record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpoStep {
    pub step: usize,
    pub loss: f64,
    /// 1, 0.5 or 0 according to the sign of this step's margin.
    pub accuracy: f64,
}

/// Optimizes `Φ^d` only, one pair per step drawn from a uniformly chosen pool.
///
/// Switches the model to stage-2 flags if it is not there already; `Φ^d`
/// is not re-initialized. Fails on a non-finite loss.
pub fn train_stage2(
    model: &mut Model<f32>,
    pools: &[PreferencePool<f32>],
    cfg: &DpoConfig,
    adam: AdamWConfig,
    rng: &mut impl Rng,
    mut on_step: impl FnMut(&DpoStep),
) -> Result<Vec<DpoStep>> {
    cfg.validate()?;
    if pools.is_empty() {
        return Err(TensorError::contract("train_stage2", "no preference pools"));
    }
    model.adapters.active = AdapterFlags::BOTH;
    model.adapters.trainable = AdapterFlags::PREFERENCE;
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.learning_rate, ..adam }, model.adapters.set(AdapterSet::Preference));
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let pool = &pools[rng.random_range(0..pools.len())];
        let pair = sample_pair(pool, rng)?;
        let mut tape = Tape::new();
        let theta = bind_policy(model, &mut tape);
        let margin = reward_margin(model, &mut tape, &theta, &pair)?;
        let logit = tape.scale(margin, cfg.beta as f32);
        let ls = tape.log_sigmoid(logit);
        let loss = tape.scale(ls, -1.0);
        let loss_value = tape.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            return Err(TensorError::contract("train_stage2", format!("non-finite loss at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let vars = theta.phi_d.as_ref().expect("phi_d bound");
        let g: Vec<_> = vars.iter().map(|&v| grads.get(v)).collect();
        opt.step(model.adapters.set_mut(AdapterSet::Preference), &g)?;
        let rec = DpoStep {
            step,
            loss: loss_value,
            accuracy: margin_score(tape.value(margin).item().as_f64()),
        };
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}
