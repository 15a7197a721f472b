//! Rectified-flow mathematics.
//!
//! Convention: `t = 1` is pure noise and `t = 0` is data, so
//! `z_t = (1 − t)·z_0 + t·ε` and the target velocity is `ε − z_0`. The sampler
//! integrates `z ← z − Δt·v` from `t = 1` down to `t = 0`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::null_caption;
use crate::model::{Bound, CacheVars, Model, ReferenceCache};
use crate::tensor::{Real, Result, Tape, Tensor, TensorError, Var};

/// One noised training example.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<T = f32> {
    pub z0: Tensor<T>,
    pub eps: Tensor<T>,
    pub t: f64,
    pub z_t: Tensor<T>,
    pub v_target: Tensor<T>,
}

/// A target with random `t` plus clean references sharing its identity.
/// The target is index 0; references are indices `1..N` and sit at `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupBatch<T = f32> {
    pub target: FlowSample<T>,
    pub references: Vec<Tensor<T>>,
    pub condition: Vec<usize>,
    pub identity_id: usize,
}

impl<T: Real> GroupBatch<T> {
    pub fn group_size(&self) -> usize {
        self.references.len() + 1
    }

    /// Diffusion time of each reference. Always zero.
    pub fn reference_times(&self) -> Vec<f64> {
        vec![0.0; self.references.len()]
    }
}

/// `t = sigmoid(g)` with `g ~ N(0, 1)`.
pub fn sample_timestep(rng: &mut impl Rng) -> f64 {
    let g: f64 = rng.sample(StandardNormal);
    let t = 1.0 / (1.0 + (-g).exp());
    // Keep t strictly inside (0, 1) even for extreme draws.
    t.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

pub fn standard_normal<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Builds `z_t = (1 − t)·z_0 + t·ε` and `v = ε − z_0`.
pub fn interpolate<T: Real>(z0: &Tensor<T>, eps: &Tensor<T>, t: f64) -> Result<FlowSample<T>> {
    if z0.shape() != eps.shape() {
        return Err(TensorError::shape("interpolate", z0.shape(), eps.shape()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(TensorError::contract("interpolate", format!("t = {t} outside [0, 1]")));
    }
    let (a, b) = (T::lit(1.0 - t), T::lit(t));
    let z_t = Tensor::new(
        z0.shape().to_vec(),
        z0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect(),
    )?;
    let v_target = eps.sub(z0)?;
    Ok(FlowSample {
        z0: z0.clone(),
        eps: eps.clone(),
        t,
        z_t,
        v_target,
    })
}

/// With probability `p` replaces the caption by the null caption.
/// Always consumes exactly one uniform draw.
pub fn apply_caption_dropout(caption: &[usize], p: f64, rng: &mut impl Rng) -> Vec<usize> {
    let u: f64 = rng.random();
    if u < p {
        null_caption(caption.len())
    } else {
        caption.to_vec()
    }
}

/// Mean squared error between the target velocity and the network output.
pub fn loss_flow_matching<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    params: &Bound,
    sample: &FlowSample<T>,
    caption: &[usize],
    cache: Option<&CacheVars>,
) -> Result<Var> {
    let z_t = tape.constant(sample.z_t.clone());
    let target = tape.constant(sample.v_target.clone());
    let v = model.forward_velocity(tape, params, z_t, sample.t, caption, cache)?;
    tape.mse(v, target)
}

/// Builds the reference cache for `references` under the current parameters.
///
/// With `reference_grad` off the cache is computed on a side tape and recorded
/// as constants, so no gradient reaches the references or flows through them.
pub fn reference_cache_on_tape<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    params: &Bound,
    references: &[Tensor<T>],
) -> Result<Option<CacheVars>> {
    if references.is_empty() {
        return Ok(None);
    }
    if model.config.reference_grad {
        let refs: Vec<Var> = references.iter().map(|r| tape.constant(r.clone())).collect();
        return Ok(Some(model.build_reference_cache(tape, params, &refs)?));
    }
    let mut side = Tape::new();
    let mut copy = |vars: &[Var]| -> Vec<Var> {
        vars.iter().map(|&v| side.constant(tape.value(v).clone())).collect()
    };
    let detached = Bound {
        base: copy(&params.base),
        phi_c: params.phi_c.as_deref().map(&mut copy),
        phi_d: params.phi_d.as_deref().map(&mut copy),
    };
    let refs: Vec<Var> = references.iter().map(|r| side.constant(r.clone())).collect();
    let cache = model.build_reference_cache(&mut side, &detached, &refs)?;
    Ok(Some(cache.to_values(&side).record(tape)))
}

/// Flow-matching loss on the target only, conditioned on clean references.
pub fn loss_stage1<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    params: &Bound,
    batch: &GroupBatch<T>,
) -> Result<Var> {
    let cache = reference_cache_on_tape(model, tape, params, &batch.references)?;
    loss_flow_matching(model, tape, params, &batch.target, &batch.condition, cache.as_ref())
}

/// Inference settings for [`euler_sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    /// Drop the references from the unconditional branch as well as the caption.
    pub drop_refs_in_uncond: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            cfg_scale: 3.5,
            drop_refs_in_uncond: false,
        }
    }
}

/// Anything that predicts a velocity for a latent at time `t`.
pub trait VelocityField<T: Real> {
    type Cache;

    fn latent_shape(&self) -> Vec<usize>;

    /// Caption length expected by [`velocity`](Self::velocity).
    fn caption_len(&self) -> usize;

    /// Per-sampling-run precomputation for the references, if any.
    fn prepare(&self, refs: &[Tensor<T>]) -> Result<Option<Self::Cache>>;

    fn velocity(&self, z: &Tensor<T>, t: f64, caption: &[usize], cache: Option<&Self::Cache>) -> Result<Tensor<T>>;
}

impl<T: Real> VelocityField<T> for Model<T> {
    type Cache = ReferenceCache<T>;

    fn latent_shape(&self) -> Vec<usize> {
        self.config.latent_shape().to_vec()
    }

    fn caption_len(&self) -> usize {
        self.config.text_len
    }

    fn prepare(&self, refs: &[Tensor<T>]) -> Result<Option<ReferenceCache<T>>> {
        if refs.is_empty() {
            Ok(None)
        } else {
            self.reference_cache(refs).map(Some)
        }
    }

    fn velocity(&self, z: &Tensor<T>, t: f64, caption: &[usize], cache: Option<&ReferenceCache<T>>) -> Result<Tensor<T>> {
        self.predict_velocity(z, t, caption, cache)
    }
}

/// Draws `z ~ N(0, 1)` and integrates with [`euler_sample_from`].
pub fn euler_sample<T: Real, F: VelocityField<T>>(
    field: &F,
    caption: &[usize],
    refs: &[Tensor<T>],
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let z = standard_normal(&field.latent_shape(), rng);
    euler_sample_from(field, z, caption, refs, cfg)
}

/// Euler integration of the guided velocity on a uniform grid from `t = 1`
/// to `t = 0`. The state is `z_1 − (Σ v_i)/steps` with the velocity sum
/// kept in 64-bit, so a constant field lands exactly on `z_1 − v`.
///
/// Guidance: `v = v_u + s·(v_c − v_u)`, where the unconditional branch uses
/// the null caption and keeps the references unless `drop_refs_in_uncond`.
/// With `s = 1` the conditional velocity is used as is.
pub fn euler_sample_from<T: Real, F: VelocityField<T>>(
    field: &F,
    z_init: Tensor<T>,
    caption: &[usize],
    refs: &[Tensor<T>],
    cfg: &SamplerConfig,
) -> Result<Tensor<T>> {
    if cfg.steps == 0 {
        return Err(TensorError::contract("euler_sample", "steps must be at least 1"));
    }
    if !(cfg.cfg_scale >= 0.0 && cfg.cfg_scale.is_finite()) {
        return Err(TensorError::contract("euler_sample", format!("cfg_scale {} invalid", cfg.cfg_scale)));
    }
    let cache = field.prepare(refs)?;
    let uncond_cache = if cfg.drop_refs_in_uncond { None } else { cache.as_ref() };
    let null = null_caption(field.caption_len());
    let shape = z_init.shape().to_vec();
    let start: Vec<f64> = z_init.data().iter().map(|x| x.as_f64()).collect();
    let mut sum = vec![0.0f64; start.len()];
    let n = cfg.steps as f64;
    let mut z = z_init;
    for i in 0..cfg.steps {
        let t = 1.0 - i as f64 / n;
        let v_c = field.velocity(&z, t, caption, cache.as_ref())?;
        if cfg.cfg_scale == 1.0 {
            for (s, &v) in sum.iter_mut().zip(v_c.data()) {
                *s += v.as_f64();
            }
        } else {
            let v_u = field.velocity(&z, t, &null, uncond_cache)?;
            let g = cfg.cfg_scale;
            for ((s, &c), &u) in sum.iter_mut().zip(v_c.data()).zip(v_u.data()) {
                let (c, u) = (c.as_f64(), u.as_f64());
                *s += u + g * (c - u);
            }
        }
        z = Tensor::new(shape.clone(), start.iter().zip(&sum).map(|(&a, &s)| T::lit(a - s / n)).collect())?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z0: Tensor<f32> = standard_normal(&[4, 4, 2], &mut rng);
        let eps: Tensor<f32> = standard_normal(&[4, 4, 2], &mut rng);
        assert_eq!(interpolate(&z0, &eps, 0.0).unwrap().z_t, z0);
        assert_eq!(interpolate(&z0, &eps, 1.0).unwrap().z_t, eps);

        let zero = Tensor::<f32>::zeros([2]);
        let two = Tensor::full([2], 2.0f32);
        let s = interpolate(&zero, &two, 0.5).unwrap();
        assert_eq!(s.z_t.data(), &[1.0, 1.0]);
        assert_eq!(s.v_target.data(), &[2.0, 2.0]);
    }

    #[test]
    fn interpolation_rejects_mismatch() {
        let a = Tensor::<f32>::zeros([2]);
        let b = Tensor::<f32>::zeros([3]);
        assert!(interpolate(&a, &b, 0.5).is_err());
    }

    #[test]
    fn timestep_is_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let t = sample_timestep(&mut rng);
            assert!(t > 0.0 && t < 1.0);
        }
    }

    #[test]
    fn caption_dropout_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cap = vec![1, 5, 21, 40, 52, 2, 3, 3];
        for _ in 0..1000 {
            assert_eq!(apply_caption_dropout(&cap, 0.0, &mut rng), cap);
            assert_eq!(apply_caption_dropout(&cap, 1.0, &mut rng), null_caption(8));
        }
    }
}
