//! Flat parameter layout and the three-way adapter composition.

use rand::Rng;

use super::config::ModelConfig;
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

/// Linear layers inside a block that carry LoRA adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Modulation,
    Query,
    Key,
    Value,
    Output,
    FfnIn,
    FfnOut,
}

impl Slot {
    pub const ALL: [Slot; 7] = [
        Slot::Modulation,
        Slot::Query,
        Slot::Key,
        Slot::Value,
        Slot::Output,
        Slot::FfnIn,
        Slot::FfnOut,
    ];

    fn ordinal(self) -> usize {
        self as usize
    }

    fn name(self) -> &'static str {
        match self {
            Slot::Modulation => "mod",
            Slot::Query => "q",
            Slot::Key => "k",
            Slot::Value => "v",
            Slot::Output => "o",
            Slot::FfnIn => "ff1",
            Slot::FfnOut => "ff2",
        }
    }

    /// `(in, out)` features of the slot's linear.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        let h = cfg.hidden_dim;
        match self {
            Slot::Modulation => (h, 6 * h),
            Slot::Query | Slot::Key | Slot::Value | Slot::Output => (h, h),
            Slot::FfnIn => (h, cfg.mlp_dim()),
            Slot::FfnOut => (cfg.mlp_dim(), h),
        }
    }
}

// Base tensors before the first block.
pub(crate) const TEXT_EMBED: usize = 0;
pub(crate) const TEXT_POS: usize = 1;
pub(crate) const ROW_EMBED: usize = 2;
pub(crate) const COL_EMBED: usize = 3;
pub(crate) const SAMPLE_EMBED: usize = 4;
pub(crate) const PATCH_W: usize = 5;
pub(crate) const PATCH_B: usize = 6;
pub(crate) const TIME_FC1_W: usize = 7;
pub(crate) const TIME_FC1_B: usize = 8;
pub(crate) const TIME_FC2_W: usize = 9;
pub(crate) const TIME_FC2_B: usize = 10;
const BLOCKS_START: usize = 11;
const PER_BLOCK: usize = 16;

/// Offsets within a block.
pub(crate) const Q_NORM: usize = 14;
pub(crate) const K_NORM: usize = 15;

pub(crate) fn block_linear(block: usize, slot: Slot) -> (usize, usize) {
    let w = BLOCKS_START + block * PER_BLOCK + 2 * slot.ordinal();
    (w, w + 1)
}

pub(crate) fn block_tensor(block: usize, offset: usize) -> usize {
    BLOCKS_START + block * PER_BLOCK + offset
}

pub(crate) fn final_indices(depth: usize) -> [usize; 4] {
    let s = BLOCKS_START + depth * PER_BLOCK;
    [s, s + 1, s + 2, s + 3]
}

pub(crate) fn lora_index(block: usize, slot: Slot) -> (usize, usize) {
    let a = (block * Slot::ALL.len() + slot.ordinal()) * 2;
    (a, a + 1)
}

/// Names and shapes of every base tensor, in storage order.
pub fn base_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = cfg.hidden_dim;
    let gp = cfg.grid_patches();
    let mut out = vec![
        ("text_embed".to_string(), vec![cfg.vocab_size, h]),
        ("text_pos".to_string(), vec![cfg.text_len, h]),
        ("row_embed".to_string(), vec![gp, h]),
        ("col_embed".to_string(), vec![gp, h]),
        ("sample_embed".to_string(), vec![cfg.max_references + 1, h]),
        ("patch_in.w".to_string(), vec![h, cfg.patch_dim()]),
        ("patch_in.b".to_string(), vec![h]),
        ("time.fc1.w".to_string(), vec![h, cfg.time_freq_dim]),
        ("time.fc1.b".to_string(), vec![h]),
        ("time.fc2.w".to_string(), vec![h, h]),
        ("time.fc2.b".to_string(), vec![h]),
    ];
    for b in 0..cfg.depth {
        for slot in Slot::ALL {
            let (i, o) = slot.dims(cfg);
            out.push((format!("blocks.{b}.{}.w", slot.name()), vec![o, i]));
            out.push((format!("blocks.{b}.{}.b", slot.name()), vec![o]));
        }
        out.push((format!("blocks.{b}.q_norm"), vec![cfg.head_dim()]));
        out.push((format!("blocks.{b}.k_norm"), vec![cfg.head_dim()]));
    }
    out.push(("final.mod.w".to_string(), vec![2 * h, h]));
    out.push(("final.mod.b".to_string(), vec![2 * h]));
    out.push(("final.head.w".to_string(), vec![cfg.patch_dim(), h]));
    out.push(("final.head.b".to_string(), vec![cfg.patch_dim()]));
    out
}

/// Names and shapes of one LoRA set, in storage order.
pub fn lora_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let r = cfg.lora_rank;
    let mut out = Vec::new();
    for b in 0..cfg.depth {
        for slot in Slot::ALL {
            let (i, o) = slot.dims(cfg);
            out.push((format!("blocks.{b}.{}.lora_a", slot.name()), vec![r, i]));
            out.push((format!("blocks.{b}.{}.lora_b", slot.name()), vec![o, r]));
        }
    }
    out
}

fn init_base<T: Real>(cfg: &ModelConfig, rng: &mut impl Rng) -> Vec<Tensor<T>> {
    let layout = base_layout(cfg);
    let mut out: Vec<Tensor<T>> = Vec::with_capacity(layout.len());
    for (name, shape) in &layout {
        let fan_in = *shape.last().unwrap() as f64;
        let t = if name.ends_with("_norm") {
            Tensor::full(shape.clone(), T::one())
        } else if name == "text_embed" {
            Tensor::randn(shape.clone(), 1.0, rng)
        } else if name.ends_with("_pos") || name.ends_with("_embed") {
            Tensor::randn(shape.clone(), 0.5, rng)
        } else if name.starts_with("final.head") && name.ends_with(".w") {
            Tensor::randn(shape.clone(), 2.0 / fan_in.sqrt(), rng)
        } else if name.ends_with("mod.w") {
            Tensor::randn(shape.clone(), 0.1 / fan_in.sqrt(), rng)
        } else if name.ends_with(".w") {
            Tensor::randn(shape.clone(), 1.0 / fan_in.sqrt(), rng)
        } else {
            Tensor::zeros(shape.clone())
        };
        out.push(t);
    }
    // Gates of the block modulation start open so the frozen blocks contribute.
    let h = cfg.hidden_dim;
    for b in 0..cfg.depth {
        let (_, bias) = block_linear(b, Slot::Modulation);
        let data = out[bias].data_mut();
        for chunk in [2, 5] {
            for v in &mut data[chunk * h..(chunk + 1) * h] {
                *v = T::lit(BLOCK_GATE_INIT);
            }
        }
    }
    out
}

const BLOCK_GATE_INIT: f64 = 1.0;

/// LoRA set with `A` drawn uniformly in `±1/sqrt(in)` and `B = 0`.
fn init_lora<T: Real>(cfg: &ModelConfig, rng: &mut impl Rng) -> Vec<Tensor<T>> {
    lora_layout(cfg)
        .into_iter()
        .map(|(name, shape)| {
            if name.ends_with("lora_a") {
                let bound = 1.0 / (shape[1] as f64).sqrt();
                Tensor::uniform(shape, bound, rng)
            } else {
                Tensor::zeros(shape)
            }
        })
        .collect()
}

/// Which adapter set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AdapterSet {
    Base,
    Consistency,
    Preference,
}

impl AdapterSet {
    pub fn name(self) -> &'static str {
        match self {
            AdapterSet::Base => "base",
            AdapterSet::Consistency => "phi_c",
            AdapterSet::Preference => "phi_d",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "base" => Some(AdapterSet::Base),
            "phi_c" => Some(AdapterSet::Consistency),
            "phi_d" => Some(AdapterSet::Preference),
            _ => None,
        }
    }
}

/// On/off switch per LoRA set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct AdapterFlags {
    pub consistency: bool,
    pub preference: bool,
}

impl AdapterFlags {
    pub const NONE: AdapterFlags = AdapterFlags { consistency: false, preference: false };
    pub const CONSISTENCY: AdapterFlags = AdapterFlags { consistency: true, preference: false };
    pub const BOTH: AdapterFlags = AdapterFlags { consistency: true, preference: true };
    pub const PREFERENCE: AdapterFlags = AdapterFlags { consistency: false, preference: true };

    pub fn get(self, set: AdapterSet) -> bool {
        match set {
            AdapterSet::Base => true,
            AdapterSet::Consistency => self.consistency,
            AdapterSet::Preference => self.preference,
        }
    }
}

/// `M = Φ + Φ^c + Φ^d`: frozen base weights plus two LoRA sets.
///
/// An adapted layer's effective weight is
/// `W + s·B_c·A_c·[c active] + s·B_d·A_d·[d active]` with `s = α/r`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterComposition<T = f32> {
    pub base: Vec<Tensor<T>>,
    pub phi_c: Vec<Tensor<T>>,
    pub phi_d: Vec<Tensor<T>>,
    pub active: AdapterFlags,
    pub trainable: AdapterFlags,
}

impl<T: Real> AdapterComposition<T> {
    /// Fresh weights: random base, both LoRA sets with zero `B`.
    /// Stage-1 flags: `Φ^c` active and trainable, `Φ^d` off.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let base = init_base(cfg, rng);
        let phi_c = init_lora(cfg, rng);
        let phi_d = init_lora(cfg, rng);
        AdapterComposition {
            base,
            phi_c,
            phi_d,
            active: AdapterFlags::CONSISTENCY,
            trainable: AdapterFlags::CONSISTENCY,
        }
    }

    pub fn set(&self, set: AdapterSet) -> &[Tensor<T>] {
        match set {
            AdapterSet::Base => &self.base,
            AdapterSet::Consistency => &self.phi_c,
            AdapterSet::Preference => &self.phi_d,
        }
    }

    pub fn set_mut(&mut self, set: AdapterSet) -> &mut Vec<Tensor<T>> {
        match set {
            AdapterSet::Base => &mut self.base,
            AdapterSet::Consistency => &mut self.phi_c,
            AdapterSet::Preference => &mut self.phi_d,
        }
    }

    /// Re-draws `Φ^d` (A random, B zero) and switches to stage-2 flags:
    /// both sets active, only `Φ^d` trainable.
    pub fn begin_preference_stage(&mut self, cfg: &ModelConfig, rng: &mut impl Rng) {
        self.phi_d = init_lora(cfg, rng);
        self.active = AdapterFlags::BOTH;
        self.trainable = AdapterFlags::PREFERENCE;
    }

    pub fn cast<U: Real>(&self) -> AdapterComposition<U> {
        let c = |v: &Vec<Tensor<T>>| v.iter().map(|t| t.cast::<U>()).collect();
        AdapterComposition {
            base: c(&self.base),
            phi_c: c(&self.phi_c),
            phi_d: c(&self.phi_d),
            active: self.active,
            trainable: self.trainable,
        }
    }

    /// Records the composition on `tape`. Trainable active sets become
    /// gradient leaves; everything else is constant; inactive sets are skipped.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_as(tape, self.active, self.trainable)
    }

    /// Like [`bind`](Self::bind) with explicit flags.
    pub fn bind_as(&self, tape: &mut Tape<T>, active: AdapterFlags, trainable: AdapterFlags) -> Bound {
        let mut record = |set: &[Tensor<T>], grad: bool| -> Vec<Var> {
            set.iter()
                .map(|t| if grad { tape.param(t.clone()) } else { tape.constant(t.clone()) })
                .collect()
        };
        let base = record(&self.base, false);
        let phi_c = active
            .consistency
            .then(|| record(&self.phi_c, trainable.consistency));
        let phi_d = active
            .preference
            .then(|| record(&self.phi_d, trainable.preference));
        Bound { base, phi_c, phi_d }
    }

    /// Binds with `set` taken from caller-provided variables (used by
    /// gradient checks that own the leaves).
    pub fn bind_overriding(
        &self,
        tape: &mut Tape<T>,
        active: AdapterFlags,
        set: AdapterSet,
        vars: &[Var],
    ) -> Result<Bound, TensorError> {
        if vars.len() != self.set(set).len() {
            return Err(TensorError::contract(
                "bind_overriding",
                format!("{} vars for {} tensors", vars.len(), self.set(set).len()),
            ));
        }
        let mut bound = self.bind_as(tape, active, AdapterFlags::NONE);
        match set {
            AdapterSet::Base => bound.base = vars.to_vec(),
            AdapterSet::Consistency => bound.phi_c = Some(vars.to_vec()),
            AdapterSet::Preference => bound.phi_d = Some(vars.to_vec()),
        }
        Ok(bound)
    }
}

/// Parameter handles of a composition recorded on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub base: Vec<Var>,
    pub phi_c: Option<Vec<Var>>,
    pub phi_d: Option<Vec<Var>>,
}

impl Bound {
    /// `(A, B)` pairs of every active set for one adapted linear.
    pub(crate) fn lora_pairs(&self, block: usize, slot: Slot) -> Vec<(Var, Var)> {
        let (a, b) = lora_index(block, slot);
        [&self.phi_c, &self.phi_d]
            .into_iter()
            .flatten()
            .map(|set| (set[a], set[b]))
            .collect()
    }

    pub fn set(&self, set: AdapterSet) -> Option<&[Var]> {
        match set {
            AdapterSet::Base => Some(&self.base),
            AdapterSet::Consistency => self.phi_c.as_deref(),
            AdapterSet::Preference => self.phi_d.as_deref(),
        }
    }
}
