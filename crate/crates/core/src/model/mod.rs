//! Miniature joint text–image diffusion transformer predicting rectified-flow
//! velocities, with group-shared attention over clean reference samples.

mod config;
mod layers;
mod params;

use rand::Rng;

pub use config::{ConfigError, ModelConfig, ReferencePositions};
pub use layers::{gsa_attention, lora_linear, timestep_features};
pub use params::{base_layout, lora_layout, AdapterComposition, AdapterFlags, AdapterSet, Bound, Slot};

use params::{
    block_linear, block_tensor, final_indices, COL_EMBED, K_NORM, PATCH_B, PATCH_W, Q_NORM, ROW_EMBED,
    SAMPLE_EMBED, TEXT_EMBED, TEXT_POS, TIME_FC1_B, TIME_FC1_W, TIME_FC2_B, TIME_FC2_W,
};

use crate::tensor::{Real, Result, Tape, Tensor, TensorError, Var};

const NORM_EPS: f64 = 1e-6;

/// Image-token keys and values of each reference, per layer.
///
/// `layers[l][j]` holds `(K_img, V_img)` of reference `j` at block `l`, each
/// `image_tokens × hidden_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceCache<T = f32> {
    pub layers: Vec<Vec<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Real> ReferenceCache<T> {
    /// A cache with no references; behaves exactly like no cache.
    pub fn empty(depth: usize) -> Self {
        ReferenceCache { layers: vec![Vec::new(); depth] }
    }

    pub fn num_references(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len())
    }

    /// Number of cached key rows at layer `l`.
    pub fn key_count(&self, layer: usize) -> usize {
        self.layers[layer].iter().map(|(k, _)| k.rows()).sum()
    }

    /// Records the cached tensors as constants.
    pub fn record(&self, tape: &mut Tape<T>) -> CacheVars {
        CacheVars {
            layers: self
                .layers
                .iter()
                .map(|refs| {
                    refs.iter()
                        .map(|(k, v)| (tape.constant(k.clone()), tape.constant(v.clone())))
                        .collect()
                })
                .collect(),
        }
    }
}

/// A reference cache living on a tape.
#[derive(Clone, Debug, Default)]
pub struct CacheVars {
    pub layers: Vec<Vec<(Var, Var)>>,
}

impl CacheVars {
    pub fn to_values<T: Real>(&self, tape: &Tape<T>) -> ReferenceCache<T> {
        ReferenceCache {
            layers: self
                .layers
                .iter()
                .map(|refs| {
                    refs.iter()
                        .map(|&(k, v)| (tape.value(k).clone(), tape.value(v).clone()))
                        .collect()
                })
                .collect(),
        }
    }
}

/// Token identity inside a stream: which sample, and where.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Position {
    Text { sample: usize, index: usize },
    Image { sample: usize, row: usize, col: usize },
}

struct Stream {
    hidden: Var,
    text_len: usize,
}

/// Per-block `(K, V)` observed during a forward pass, over all tokens.
pub type Trace = Vec<(Var, Var)>;

/// The velocity network: architecture plus weights.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub adapters: AdapterComposition<T>,
    patchify_index: Vec<usize>,
    unpatchify_index: Vec<usize>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> std::result::Result<Self, ConfigError> {
        config.validate()?;
        let adapters = AdapterComposition::init(&config, rng);
        Self::from_parts(config, adapters)
    }

    pub fn from_parts(
        config: ModelConfig,
        adapters: AdapterComposition<T>,
    ) -> std::result::Result<Self, ConfigError> {
        config.validate()?;
        let expect = base_layout(&config);
        if adapters.base.len() != expect.len()
            || adapters.base.iter().zip(&expect).any(|(t, (_, s))| t.shape() != s.as_slice())
        {
            return Err(ConfigError("base weights do not match the configured layout".into()));
        }
        let lora = lora_layout(&config);
        for set in [&adapters.phi_c, &adapters.phi_d] {
            if set.len() != lora.len() || set.iter().zip(&lora).any(|(t, (_, s))| t.shape() != s.as_slice()) {
                return Err(ConfigError("adapter weights do not match the configured layout".into()));
            }
        }
        let (patchify_index, unpatchify_index) = patch_indices(&config);
        Ok(Model {
            config,
            adapters,
            patchify_index,
            unpatchify_index,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            adapters: self.adapters.cast(),
            patchify_index: self.patchify_index.clone(),
            unpatchify_index: self.unpatchify_index.clone(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.adapters.bind(tape)
    }

    fn scale(&self) -> f64 {
        self.config.lora_scale()
    }

    fn check_latent(&self, tape: &Tape<T>, z: Var) -> Result<()> {
        let shape = tape.shape(z);
        if shape != self.config.latent_shape() {
            return Err(TensorError::shape("forward_velocity", shape, &self.config.latent_shape()));
        }
        Ok(())
    }

    /// Sinusoidal features through the two-layer time MLP, `1 × hidden`.
    pub fn timestep_embed(&self, tape: &mut Tape<T>, p: &Bound, t: f64) -> Result<Var> {
        let dim = self.config.time_freq_dim;
        let feats = timestep_features(t, dim).into_iter().map(T::lit).collect();
        let f = tape.constant(Tensor::new([1, dim], feats)?);
        let h = lora_linear(tape, f, p.base[TIME_FC1_W], Some(p.base[TIME_FC1_B]), &[], 1.0)?;
        let h = tape.silu(h);
        lora_linear(tape, h, p.base[TIME_FC2_W], Some(p.base[TIME_FC2_B]), &[], 1.0)
    }

    fn text_tokens(&self, tape: &mut Tape<T>, p: &Bound, caption: &[usize], sample: usize) -> Result<Var> {
        let cfg = &self.config;
        if caption.len() != cfg.text_len {
            return Err(TensorError::contract(
                "text_tokens",
                format!("caption has {} tokens, expected {}", caption.len(), cfg.text_len),
            ));
        }
        let emb = tape.gather_rows(p.base[TEXT_EMBED], caption)?;
        let pos_ids: Vec<usize> = (0..cfg.text_len).collect();
        let pos = tape.gather_rows(p.base[TEXT_POS], &pos_ids)?;
        let x = tape.add(emb, pos)?;
        let s = tape.gather_rows(p.base[SAMPLE_EMBED], &[sample])?;
        tape.add_row(x, s)
    }

    fn image_tokens(&self, tape: &mut Tape<T>, p: &Bound, z: Var, sample: usize) -> Result<Var> {
        let cfg = &self.config;
        let patches = tape.permute(z, &self.patchify_index, [cfg.image_tokens(), cfg.patch_dim()])?;
        let x = lora_linear(tape, patches, p.base[PATCH_W], Some(p.base[PATCH_B]), &[], 1.0)?;
        let gp = cfg.grid_patches();
        let rows: Vec<usize> = (0..cfg.image_tokens()).map(|i| i / gp).collect();
        let cols: Vec<usize> = (0..cfg.image_tokens()).map(|i| i % gp).collect();
        let re = tape.gather_rows(p.base[ROW_EMBED], &rows)?;
        let ce = tape.gather_rows(p.base[COL_EMBED], &cols)?;
        let x = tape.add(x, re)?;
        let x = tape.add(x, ce)?;
        let s = tape.gather_rows(p.base[SAMPLE_EMBED], &[sample])?;
        tape.add_row(x, s)
    }

    /// Embedding-row index used for reference `j` (1-based).
    fn reference_sample_index(&self, j: usize) -> Result<usize> {
        if j > self.config.max_references {
            return Err(TensorError::contract(
                "reference_cache",
                format!("reference {j} exceeds max_references {}", self.config.max_references),
            ));
        }
        Ok(match self.config.reference_positions {
            ReferencePositions::Shared => 1,
            ReferencePositions::PerReference => j,
            ReferencePositions::None => 0,
        })
    }

    /// Positions of the target stream's tokens, text first.
    pub fn token_positions(&self, sample: usize) -> Vec<Position> {
        let cfg = &self.config;
        let gp = cfg.grid_patches();
        (0..cfg.text_len)
            .map(|index| Position::Text { sample, index })
            .chain((0..cfg.image_tokens()).map(|i| Position::Image { sample, row: i / gp, col: i % gp }))
            .collect()
    }

    fn modulation(&self, tape: &mut Tape<T>, p: &Bound, cond: Var, block: usize) -> Result<Vec<Var>> {
        let (w, b) = block_linear(block, Slot::Modulation);
        let pairs = p.lora_pairs(block, Slot::Modulation);
        let m = lora_linear(tape, cond, p.base[w], Some(p.base[b]), &pairs, self.scale())?;
        let h = self.config.hidden_dim;
        (0..6).map(|i| tape.slice_cols(m, i * h, h)).collect()
    }

    fn adapted(&self, tape: &mut Tape<T>, p: &Bound, x: Var, block: usize, slot: Slot) -> Result<Var> {
        let (w, b) = block_linear(block, slot);
        let pairs = p.lora_pairs(block, slot);
        lora_linear(tape, x, p.base[w], Some(p.base[b]), &pairs, self.scale())
    }

    fn modulate(&self, tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let n = tape.layer_norm(x, None, NORM_EPS)?;
        let one_plus = tape.add_scalar(scale, T::one());
        let y = tape.mul_row(n, one_plus)?;
        tape.add_row(y, shift)
    }

    fn qk_norm(&self, tape: &mut Tape<T>, x: Var, scale: Var) -> Result<Var> {
        let rows = tape.value(x).rows();
        let (h, d) = (self.config.num_heads, self.config.head_dim());
        let split = tape.reshape(x, [rows * h, d])?;
        let normed = tape.rms_norm(split, scale, NORM_EPS)?;
        tape.reshape(normed, [rows, h * d])
    }

    /// One transformer block. Returns the new hidden state and the block's
    /// `(K, V)` over all stream tokens.
    fn block(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        cond: Var,
        block: usize,
        references: &[(Var, Var)],
    ) -> Result<(Var, (Var, Var))> {
        let m = self.modulation(tape, p, cond, block)?;
        let (shift1, scale1, gate1, shift2, scale2, gate2) = (m[0], m[1], m[2], m[3], m[4], m[5]);

        let h = self.modulate(tape, x, shift1, scale1)?;
        let q = self.adapted(tape, p, h, block, Slot::Query)?;
        let k = self.adapted(tape, p, h, block, Slot::Key)?;
        let v = self.adapted(tape, p, h, block, Slot::Value)?;
        let q = self.qk_norm(tape, q, p.base[block_tensor(block, Q_NORM)])?;
        let k = self.qk_norm(tape, k, p.base[block_tensor(block, K_NORM)])?;
        let attn = gsa_attention(tape, q, k, v, references, self.config.num_heads)?;
        let o = self.adapted(tape, p, attn, block, Slot::Output)?;
        let o = tape.mul_row(o, gate1)?;
        let x = tape.add(x, o)?;

        let h = self.modulate(tape, x, shift2, scale2)?;
        let f = self.adapted(tape, p, h, block, Slot::FfnIn)?;
        let f = tape.gelu(f);
        let f = self.adapted(tape, p, f, block, Slot::FfnOut)?;
        let f = tape.mul_row(f, gate2)?;
        let x = tape.add(x, f)?;
        Ok((x, (k, v)))
    }

    fn run_blocks(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        stream: &Stream,
        cond: Var,
        cache: Option<&CacheVars>,
        stop_after_attention_of_last: bool,
    ) -> Result<(Var, Trace)> {
        if let Some(c) = cache {
            if c.layers.len() != self.config.depth {
                return Err(TensorError::contract(
                    "forward_velocity",
                    format!("cache has {} layers, model has {}", c.layers.len(), self.config.depth),
                ));
            }
        }
        let cond = tape.silu(cond);
        let mut x = stream.hidden;
        let mut trace = Vec::with_capacity(self.config.depth);
        for b in 0..self.config.depth {
            let refs: &[(Var, Var)] = cache.map_or(&[], |c| &c.layers[b]);
            if stop_after_attention_of_last && b + 1 == self.config.depth {
                // Only K/V of the last block are needed.
                let m = self.modulation(tape, p, cond, b)?;
                let h = self.modulate(tape, x, m[0], m[1])?;
                let k = self.adapted(tape, p, h, b, Slot::Key)?;
                let v = self.adapted(tape, p, h, b, Slot::Value)?;
                let k = self.qk_norm(tape, k, p.base[block_tensor(b, K_NORM)])?;
                trace.push((k, v));
                break;
            }
            let (nx, kv) = self.block(tape, p, x, cond, b, refs)?;
            trace.push(kv);
            x = nx;
        }
        Ok((x, trace))
    }

    fn final_layer(&self, tape: &mut Tape<T>, p: &Bound, x: Var, cond: Var, text_len: usize) -> Result<Var> {
        let cfg = &self.config;
        let [mw, mb, hw, hb] = final_indices(cfg.depth);
        let img = tape.slice_rows(x, text_len, cfg.image_tokens())?;
        let c = tape.silu(cond);
        let m = lora_linear(tape, c, p.base[mw], Some(p.base[mb]), &[], 1.0)?;
        let shift = tape.slice_cols(m, 0, cfg.hidden_dim)?;
        let scale = tape.slice_cols(m, cfg.hidden_dim, cfg.hidden_dim)?;
        let y = self.modulate(tape, img, shift, scale)?;
        let out = lora_linear(tape, y, p.base[hw], Some(p.base[hb]), &[], 1.0)?;
        tape.permute(out, &self.unpatchify_index, self.config.latent_shape())
    }

    fn target_stream(&self, tape: &mut Tape<T>, p: &Bound, z: Var, caption: &[usize]) -> Result<Stream> {
        let text = self.text_tokens(tape, p, caption, 0)?;
        let img = self.image_tokens(tape, p, z, 0)?;
        Ok(Stream {
            hidden: tape.concat_rows(&[text, img])?,
            text_len: self.config.text_len,
        })
    }

    /// Velocity prediction `v(z_t, t, c, Z_ref)` for the target sample.
    ///
    /// `cache = None` is a pure single-sample prediction; an empty cache gives
    /// the same result.
    pub fn forward_velocity(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        z_t: Var,
        t: f64,
        caption: &[usize],
        cache: Option<&CacheVars>,
    ) -> Result<Var> {
        Ok(self.forward_traced(tape, p, z_t, t, caption, cache)?.0)
    }

    /// [`forward_velocity`](Self::forward_velocity) that also returns every
    /// block's `(K, V)` over the stream tokens.
    pub fn forward_traced(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        z_t: Var,
        t: f64,
        caption: &[usize],
        cache: Option<&CacheVars>,
    ) -> Result<(Var, Trace)> {
        self.check_latent(tape, z_t)?;
        if !t.is_finite() {
            return Err(TensorError::contract("forward_velocity", format!("time {t} is not finite")));
        }
        let stream = self.target_stream(tape, p, z_t, caption)?;
        let cond = self.timestep_embed(tape, p, t)?;
        let (x, trace) = self.run_blocks(tape, p, &stream, cond, cache, false)?;
        let v = self.final_layer(tape, p, x, cond, stream.text_len)?;
        Ok((v, trace))
    }

    /// Clean (t = 0) forward of each reference, recording its image-token
    /// K/V at every block. References attend only among their own tokens.
    pub fn build_reference_cache(&self, tape: &mut Tape<T>, p: &Bound, refs: &[Var]) -> Result<CacheVars> {
        if refs.is_empty() {
            return Err(TensorError::contract(
                "build_reference_cache",
                "no references; pass cache = None instead",
            ));
        }
        let cfg = &self.config;
        let mut layers = vec![Vec::with_capacity(refs.len()); cfg.depth];
        let cond = self.timestep_embed(tape, p, 0.0)?;
        for (j, &z) in refs.iter().enumerate() {
            self.check_latent(tape, z)?;
            let sample = self.reference_sample_index(j + 1)?;
            let img = self.image_tokens(tape, p, z, sample)?;
            let (hidden, text_len) = if cfg.reference_text {
                let null = vec![crate::data::NULL_TOKEN; cfg.text_len];
                let text = self.text_tokens(tape, p, &null, sample)?;
                (tape.concat_rows(&[text, img])?, cfg.text_len)
            } else {
                (img, 0)
            };
            let stream = Stream { hidden, text_len };
            let (_, trace) = self.run_blocks(tape, p, &stream, cond, None, true)?;
            for (l, (k, v)) in trace.into_iter().enumerate() {
                let (k, v) = if text_len > 0 {
                    (
                        tape.slice_rows(k, text_len, cfg.image_tokens())?,
                        tape.slice_rows(v, text_len, cfg.image_tokens())?,
                    )
                } else {
                    (k, v)
                };
                layers[l].push((k, v));
            }
        }
        Ok(CacheVars { layers })
    }

    /// Traced t = 0 forward of one reference exactly as the cache builder
    /// runs it, but through every block. Used to audit cache contents.
    pub fn trace_reference(&self, tape: &mut Tape<T>, p: &Bound, z: Var, j: usize) -> Result<Trace> {
        let cfg = &self.config;
        self.check_latent(tape, z)?;
        let sample = self.reference_sample_index(j)?;
        let img = self.image_tokens(tape, p, z, sample)?;
        let cond = self.timestep_embed(tape, p, 0.0)?;
        let (hidden, text_len) = if cfg.reference_text {
            let null = vec![crate::data::NULL_TOKEN; cfg.text_len];
            let text = self.text_tokens(tape, p, &null, sample)?;
            (tape.concat_rows(&[text, img])?, cfg.text_len)
        } else {
            (img, 0)
        };
        let (_, trace) = self.run_blocks(tape, p, &Stream { hidden, text_len }, cond, None, false)?;
        trace
            .into_iter()
            .map(|(k, v)| {
                if text_len > 0 {
                    Ok((
                        tape.slice_rows(k, text_len, cfg.image_tokens())?,
                        tape.slice_rows(v, text_len, cfg.image_tokens())?,
                    ))
                } else {
                    Ok((k, v))
                }
            })
            .collect()
    }

    /// Value-level reference cache with no gradient history.
    pub fn reference_cache(&self, refs: &[Tensor<T>]) -> Result<ReferenceCache<T>> {
        let mut tape = Tape::new();
        let p = self.adapters.bind_as(&mut tape, self.adapters.active, AdapterFlags::NONE);
        let vars: Vec<Var> = refs.iter().map(|r| tape.constant(r.clone())).collect();
        let cache = self.build_reference_cache(&mut tape, &p, &vars)?;
        Ok(cache.to_values(&tape))
    }

    /// Value-level velocity prediction with the composition's active flags.
    pub fn predict_velocity(
        &self,
        z_t: &Tensor<T>,
        t: f64,
        caption: &[usize],
        cache: Option<&ReferenceCache<T>>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.adapters.bind_as(&mut tape, self.adapters.active, AdapterFlags::NONE);
        let z = tape.constant(z_t.clone());
        let c = cache.map(|c| c.record(&mut tape));
        let v = self.forward_velocity(&mut tape, &p, z, t, caption, c.as_ref())?;
        Ok(tape.value(v).clone())
    }
}

/// Flat-index maps between a channel-last latent and row-major patch tokens.
fn patch_indices(cfg: &ModelConfig) -> (Vec<usize>, Vec<usize>) {
    let (g, p, c) = (cfg.latent_grid, cfg.patch_size, cfg.latent_channels);
    let gp = cfg.grid_patches();
    let mut forward = Vec::with_capacity(cfg.latent_len());
    for pr in 0..gp {
        for pc in 0..gp {
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        forward.push(((pr * p + dy) * g + (pc * p + dx)) * c + ch);
                    }
                }
            }
        }
    }
    let mut inverse = vec![0; forward.len()];
    for (token_pos, &latent_pos) in forward.iter().enumerate() {
        inverse[latent_pos] = token_pos;
    }
    (forward, inverse)
}
