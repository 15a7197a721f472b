//! Finite-difference audits of the training losses on a small 64-bit model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{encode_caption, null_caption};
use crate::dpo::{loss_dpo, sample_pair, PreferencePool};
use crate::flow::{interpolate, loss_flow_matching, loss_stage1, sample_timestep, standard_normal, GroupBatch};
use crate::model::{AdapterFlags, AdapterSet, Model, ModelConfig};
use crate::tensor::{grad_check_many, Result, Tensor};

pub const GRAD_CHECK_EPS: f64 = 1e-4;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckLine {
    pub name: &'static str,
    pub max_relative_error: f64,
    pub coordinates: usize,
}

impl GradCheckLine {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRAD_CHECK_TOLERANCE
    }
}

/// A model with every LoRA set filled with small random values so that all
/// paths carry gradient.
pub fn perturbed_model(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Model<f64>> {
    let mut model = Model::<f64>::new(cfg.clone(), rng).map_err(|e| crate::tensor::TensorError::contract("grad_check", e.to_string()))?;
    for set in [AdapterSet::Consistency, AdapterSet::Preference] {
        for t in model.adapters.set_mut(set).iter_mut() {
            *t = Tensor::randn(t.shape().to_vec(), 0.05, rng);
        }
    }
    Ok(model)
}

fn caption(cfg: &ModelConfig, rng: &mut impl Rng) -> Vec<usize> {
    encode_caption(rng.random_range(0..16), rng.random_range(0..16), rng.random_range(0..4), cfg.text_len)
        .unwrap_or_else(|| null_caption(cfg.text_len))
}

/// Checks `loss_flow_matching`, `loss_stage1` (both w.r.t. `Φ^c`) and
/// `loss_dpo` (w.r.t. `Φ^d`) against central differences.
///
/// `cfg.reference_grad` is forced on: the finite differences see the
/// dependence of the reference cache on the weights, so the analytic side
/// must too.
pub fn loss_gradient_report(cfg: &ModelConfig, seed: u64) -> Result<Vec<GradCheckLine>> {
    let cfg = ModelConfig {
        reference_grad: true,
        ..cfg.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = perturbed_model(&cfg, &mut rng)?;
    let shape = cfg.latent_shape();
    let z0: Tensor<f64> = standard_normal(&shape, &mut rng);
    let eps: Tensor<f64> = standard_normal(&shape, &mut rng);
    let sample = interpolate(&z0, &eps, sample_timestep(&mut rng))?;
    let cap = caption(&cfg, &mut rng);
    let refs: Vec<Tensor<f64>> = (0..2).map(|_| standard_normal(&shape, &mut rng)).collect();
    let batch = GroupBatch {
        target: sample.clone(),
        references: refs.clone(),
        condition: cap.clone(),
        identity_id: 0,
    };
    let phi_c = model.adapters.set(AdapterSet::Consistency).to_vec();
    let phi_d = model.adapters.set(AdapterSet::Preference).to_vec();
    let coords = |xs: &[Tensor<f64>]| xs.iter().map(|t| t.len()).sum();
    let mut out = Vec::new();

    let e = grad_check_many(
        |tape, vars| {
            let p = model.adapters.bind_overriding(tape, AdapterFlags::CONSISTENCY, AdapterSet::Consistency, vars)?;
            loss_flow_matching(&model, tape, &p, &sample, &cap, None)
        },
        &phi_c,
        GRAD_CHECK_EPS,
        1,
    )?;
    out.push(GradCheckLine { name: "loss_flow_matching", max_relative_error: e, coordinates: coords(&phi_c) });

    let e = grad_check_many(
        |tape, vars| {
            let p = model.adapters.bind_overriding(tape, AdapterFlags::CONSISTENCY, AdapterSet::Consistency, vars)?;
            loss_stage1(&model, tape, &p, &batch)
        },
        &phi_c,
        GRAD_CHECK_EPS,
        1,
    )?;
    out.push(GradCheckLine { name: "loss_stage1", max_relative_error: e, coordinates: coords(&phi_c) });

    let pool = PreferencePool {
        scenario_id: 0,
        condition: cap.clone(),
        references: refs,
        winners: vec![z0.clone()],
        losers: vec![standard_normal(&shape, &mut rng)],
    };
    let pair = sample_pair(&pool, &mut rng)?;
    let e = grad_check_many(
        |tape, vars| {
            let p = model.adapters.bind_overriding(tape, AdapterFlags::BOTH, AdapterSet::Preference, vars)?;
            loss_dpo(&model, tape, &p, &pair, 1800.0)
        },
        &phi_d,
        GRAD_CHECK_EPS,
        1,
    )?;
    out.push(GradCheckLine { name: "loss_dpo", max_relative_error: e, coordinates: coords(&phi_d) });
    Ok(out)
}
