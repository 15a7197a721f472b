use gsaflow_core::model::{
    base_layout, gsa_attention, lora_layout, lora_linear, timestep_features, AdapterFlags, AdapterSet, Model,
    ModelConfig, ReferencePositions,
};
use gsaflow_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn caption(cfg: &ModelConfig, r: &mut impl Rng) -> Vec<usize> {
    (0..cfg.text_len).map(|_| r.random_range(0..cfg.vocab_size)).collect()
}

/// A model whose two LoRA sets are filled with random values.
fn adapted_model(cfg: ModelConfig, seed: u64) -> Model<f64> {
    let mut r = rng(seed);
    let mut m = Model::<f64>::new(cfg, &mut r).unwrap();
    for set in [AdapterSet::Consistency, AdapterSet::Preference] {
        for t in m.adapters.set_mut(set).iter_mut() {
            *t = Tensor::randn(t.shape().to_vec(), 0.3, &mut r);
        }
    }
    m
}

// ---------------------------------------------------------------- attention

/// Dense-loop multi-head attention of `q` over the row-concatenation of
/// `keys`/`values`, in plain f64.
fn dense_attention(q: &[Vec<f64>], keys: &[Vec<f64>], values: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let width = q[0].len();
    let d = width / heads;
    let mut out = vec![vec![0.0; width]; q.len()];
    for (i, qi) in q.iter().enumerate() {
        for h in 0..heads {
            let cols = h * d..(h + 1) * d;
            let scores: Vec<f64> = keys
                .iter()
                .map(|k| cols.clone().map(|c| qi[c] * k[c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = w.iter().sum();
            for (wj, vj) in w.iter().zip(values) {
                for c in cols.clone() {
                    out[i][c] += wj / z * vj[c];
                }
            }
        }
    }
    out
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols()).map(|r| r.to_vec()).collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn gsa_without_references_is_self_attention() {
    let mut r = rng(10);
    for _ in 0..100 {
        let heads = r.random_range(1..4);
        let width = heads * r.random_range(1..5);
        let n = r.random_range(1..10);
        let [q, k, v] = [0, 1, 2].map(|_| Tensor::<f64>::randn([n, width], 1.0, &mut r));
        let mut tape = Tape::new();
        let (vq, vk, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let out = gsa_attention(&mut tape, vq, vk, vv, &[], heads).unwrap();
        let expect = dense_attention(&rows(&q), &rows(&k), &rows(&v), heads);
        assert!(max_diff(&rows(tape.value(out)), &expect) < 1e-6);
    }
}

#[test]
fn gsa_matches_dense_oracle_over_extended_keys() {
    let mut r = rng(11);
    for _ in 0..100 {
        let heads = r.random_range(1..4);
        let width = heads * r.random_range(1..5);
        let n = r.random_range(1..10);
        let nref = r.random_range(1..4);
        let [q, k, v] = [0, 1, 2].map(|_| Tensor::<f64>::randn([n, width], 1.0, &mut r));
        let refs: Vec<(Tensor<f64>, Tensor<f64>)> = (0..nref)
            .map(|_| {
                let m = r.random_range(1..6);
                (Tensor::randn([m, width], 1.0, &mut r), Tensor::randn([m, width], 1.0, &mut r))
            })
            .collect();
        let mut tape = Tape::new();
        let (vq, vk, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let rv: Vec<(Var, Var)> = refs
            .iter()
            .map(|(a, b)| (tape.constant(a.clone()), tape.constant(b.clone())))
            .collect();
        let out = gsa_attention(&mut tape, vq, vk, vv, &rv, heads).unwrap();
        let mut keys = rows(&k);
        let mut values = rows(&v);
        for (a, b) in &refs {
            keys.extend(rows(a));
            values.extend(rows(b));
        }
        let expect = dense_attention(&rows(&q), &keys, &values, heads);
        assert!(max_diff(&rows(tape.value(out)), &expect) < 1e-6);
    }
}

#[test]
fn gsa_tiny_case_two_text_four_image_tokens() {
    let mut r = rng(12);
    let [q, k, v] = [0, 1, 2].map(|_| Tensor::<f64>::randn([6, 4], 1.0, &mut r));
    let (rk, rv) = (Tensor::<f64>::randn([4, 4], 1.0, &mut r), Tensor::<f64>::randn([4, 4], 1.0, &mut r));
    let mut tape = Tape::new();
    let vars = [&q, &k, &v, &rk, &rv].map(|t| tape.constant(t.clone()));
    let out = gsa_attention(&mut tape, vars[0], vars[1], vars[2], &[(vars[3], vars[4])], 1).unwrap();
    let mut keys = rows(&k);
    keys.extend(rows(&rk));
    let mut values = rows(&v);
    values.extend(rows(&rv));
    assert!(max_diff(&rows(tape.value(out)), &dense_attention(&rows(&q), &keys, &values, 1)) < 1e-6);
}

#[test]
fn duplicated_own_keys_keep_rows_normalized() {
    let mut r = rng(13);
    let [q, k] = [0, 1].map(|_| Tensor::<f64>::randn([6, 4], 1.0, &mut r));
    // With V = 1 the output is exactly the attention row sum.
    let ones = Tensor::<f64>::full([6, 4], 1.0);
    let mut tape = Tape::new();
    let (vq, vk, vv) = (tape.constant(q), tape.constant(k), tape.constant(ones));
    let img_k = tape.slice_rows(vk, 2, 4).unwrap();
    let img_v = tape.slice_rows(vv, 2, 4).unwrap();
    let out = gsa_attention(&mut tape, vq, vk, vv, &[(img_k, img_v)], 2).unwrap();
    assert_eq!(tape.shape(out), &[6, 4]);
    for x in tape.value(out).data() {
        assert!((x - 1.0).abs() < 1e-6);
    }
}

#[test]
fn reference_order_does_not_change_attention() {
    let mut r = rng(14);
    for _ in 0..20 {
        let [q, k, v] = [0, 1, 2].map(|_| Tensor::<f64>::randn([5, 8], 1.0, &mut r));
        let refs: Vec<(Tensor<f64>, Tensor<f64>)> =
            (0..3).map(|_| (Tensor::randn([4, 8], 1.0, &mut r), Tensor::randn([4, 8], 1.0, &mut r))).collect();
        let run = |order: &[usize]| {
            let mut tape = Tape::new();
            let (vq, vk, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
            let rv: Vec<(Var, Var)> = order
                .iter()
                .map(|&i| (tape.constant(refs[i].0.clone()), tape.constant(refs[i].1.clone())))
                .collect();
            let out = gsa_attention(&mut tape, vq, vk, vv, &rv, 2).unwrap();
            tape.value(out).clone()
        };
        assert!(run(&[0, 1, 2]).max_abs_diff(&run(&[2, 0, 1])) < 1e-6);
    }
}

#[test]
fn gsa_rejects_head_dim_mismatch() {
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(Tensor::zeros([2, 4]));
    let rk = tape.constant(Tensor::zeros([2, 6]));
    assert!(gsa_attention(&mut tape, q, q, q, &[(rk, rk)], 2).is_err());
}

// ---------------------------------------------------------------- lora

#[test]
fn lora_matches_materialized_weight() {
    let mut r = rng(20);
    for _ in 0..50 {
        let (n, i, o, rank) = (r.random_range(1..5), r.random_range(1..7), r.random_range(1..7), r.random_range(1..4));
        let s = r.random_range(0.1..3.0);
        let x = Tensor::<f64>::randn([n, i], 1.0, &mut r);
        let w = Tensor::<f64>::randn([o, i], 1.0, &mut r);
        let bias = Tensor::<f64>::randn([o], 1.0, &mut r);
        let pairs: Vec<(Tensor<f64>, Tensor<f64>)> = (0..2)
            .map(|_| (Tensor::randn([rank, i], 1.0, &mut r), Tensor::randn([o, rank], 1.0, &mut r)))
            .collect();
        let mut eff = w.clone();
        for (a, b) in &pairs {
            eff = eff.add(&b.matmul(a).unwrap().scale(s)).unwrap();
        }
        let mut tape = Tape::new();
        let (vx, vw, vb) = (tape.constant(x.clone()), tape.constant(w), tape.constant(bias.clone()));
        let vp: Vec<(Var, Var)> = pairs
            .iter()
            .map(|(a, b)| (tape.constant(a.clone()), tape.constant(b.clone())))
            .collect();
        let y = lora_linear(&mut tape, vx, vw, Some(vb), &vp, s).unwrap();
        let y = tape.value(y);
        let dense = x.matmul(&eff.transpose().unwrap()).unwrap();
        for row in 0..n {
            for c in 0..o {
                assert!((y.at(row, c) - dense.at(row, c) - bias.data()[c]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn lora_rank_one_unit_vector() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let w = tape.constant(Tensor::zeros([3, 3]));
    let a = tape.constant(Tensor::new([1, 3], vec![0.0, 1.0, 0.0]).unwrap());
    let b = tape.constant(Tensor::new([3, 1], vec![0.0, 1.0, 0.0]).unwrap());
    let y = lora_linear(&mut tape, x, w, None, &[(a, b)], 1.0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 2.0, 0.0]);
}

// ---------------------------------------------------------------- model

#[test]
fn zero_adapters_give_base_forward_bit_for_bit() {
    let mut r = rng(30);
    let cfg = ModelConfig::tiny();
    let mut m = Model::<f32>::new(cfg.clone(), &mut r).unwrap();
    m.adapters.active = AdapterFlags::BOTH;
    for set in [AdapterSet::Consistency, AdapterSet::Preference] {
        for (t, (name, _)) in m.adapters.set_mut(set).iter_mut().zip(lora_layout(&cfg)) {
            if name.ends_with("lora_a") {
                *t = Tensor::randn(t.shape().to_vec(), 1.0, &mut r);
            }
        }
    }
    let mut base_only = m.clone();
    base_only.adapters.active = AdapterFlags::NONE;
    let z = Tensor::randn(cfg.latent_shape(), 1.0, &mut r);
    let refs = vec![Tensor::randn(cfg.latent_shape(), 1.0, &mut r)];
    let cap = caption(&cfg, &mut r);
    let a = m.predict_velocity(&z, 0.4, &cap, Some(&m.reference_cache(&refs).unwrap())).unwrap();
    let b = base_only
        .predict_velocity(&z, 0.4, &cap, Some(&base_only.reference_cache(&refs).unwrap()))
        .unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn empty_cache_equals_absent_cache() {
    let m = adapted_model(ModelConfig::tiny(), 31);
    let mut r = rng(31);
    let z = Tensor::randn(m.config.latent_shape(), 1.0, &mut r);
    let cap = caption(&m.config, &mut r);
    let empty = gsaflow_core::model::ReferenceCache::empty(m.config.depth);
    let a = m.predict_velocity(&z, 0.7, &cap, None).unwrap();
    let b = m.predict_velocity(&z, 0.7, &cap, Some(&empty)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn identical_references_cache_identical_tensors() {
    let m = adapted_model(ModelConfig::tiny(), 32);
    let z = Tensor::randn(m.config.latent_shape(), 1.0, &mut rng(32));
    let cache = m.reference_cache(&[z.clone(), z]).unwrap();
    for layer in &cache.layers {
        assert_eq!(layer[0], layer[1]);
    }
    assert_eq!(cache.key_count(0), 2 * m.config.image_tokens());
}

#[test]
fn cache_equals_plain_clean_forward_trace() {
    for reference_text in [false, true] {
        let cfg = ModelConfig { reference_text, ..ModelConfig::tiny() };
        let m = adapted_model(cfg, 33);
        let mut r = rng(33);
        let refs: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::randn(m.config.latent_shape(), 1.0, &mut r)).collect();
        let cache = m.reference_cache(&refs).unwrap();
        for (j, z) in refs.iter().enumerate() {
            let mut tape = Tape::new();
            let p = m.bind(&mut tape);
            let zv = tape.constant(z.clone());
            let trace = m.trace_reference(&mut tape, &p, zv, j + 1).unwrap();
            for (l, (k, v)) in trace.iter().enumerate() {
                assert!(tape.value(*k).max_abs_diff(&cache.layers[l][j].0) < 1e-12);
                assert!(tape.value(*v).max_abs_diff(&cache.layers[l][j].1) < 1e-12);
            }
        }
    }
}

#[test]
fn model_output_ignores_reference_order() {
    let m = adapted_model(ModelConfig::tiny(), 34);
    let mut r = rng(34);
    let refs: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(m.config.latent_shape(), 1.0, &mut r)).collect();
    let z = Tensor::randn(m.config.latent_shape(), 1.0, &mut r);
    let cap = caption(&m.config, &mut r);
    let a = m.predict_velocity(&z, 0.3, &cap, Some(&m.reference_cache(&refs).unwrap())).unwrap();
    let rev: Vec<_> = refs.iter().rev().cloned().collect();
    let b = m.predict_velocity(&z, 0.3, &cap, Some(&m.reference_cache(&rev).unwrap())).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-6);
}

#[test]
fn references_change_values_not_shapes() {
    for positions in [ReferencePositions::Shared, ReferencePositions::PerReference, ReferencePositions::None] {
        let m = adapted_model(ModelConfig { reference_positions: positions, ..ModelConfig::tiny() }, 35);
        let mut r = rng(35);
        let z = Tensor::randn(m.config.latent_shape(), 1.0, &mut r);
        let refs = vec![Tensor::randn(m.config.latent_shape(), 1.0, &mut r)];
        let cap = caption(&m.config, &mut r);
        let a = m.predict_velocity(&z, 0.5, &cap, None).unwrap();
        let b = m.predict_velocity(&z, 0.5, &cap, Some(&m.reference_cache(&refs).unwrap())).unwrap();
        assert_eq!(a.shape(), b.shape());
        assert!(a.max_abs_diff(&b) > 0.0);
    }
}

#[test]
fn too_many_references_is_contract_error() {
    let m = adapted_model(ModelConfig::tiny(), 36);
    let z = Tensor::randn(m.config.latent_shape(), 1.0, &mut rng(36));
    let refs = vec![z; m.config.max_references + 1];
    let cfg = ModelConfig { reference_positions: ReferencePositions::PerReference, ..m.config.clone() };
    let per = Model::from_parts(cfg, m.adapters.clone()).unwrap();
    assert!(per.reference_cache(&refs).is_err());
}

// ---------------------------------------------------------------- hand trace

type Mat = Vec<Vec<f64>>;

struct Weights<'a> {
    model: &'a Model<f64>,
}

impl Weights<'_> {
    fn base(&self, name: &str) -> &Tensor<f64> {
        let i = base_layout(&self.model.config).iter().position(|(n, _)| n == name).unwrap();
        &self.model.adapters.base[i]
    }

    fn lora(&self, set: AdapterSet, name: &str) -> &Tensor<f64> {
        let i = lora_layout(&self.model.config).iter().position(|(n, _)| n == name).unwrap();
        &self.model.adapters.set(set)[i]
    }

    /// Effective `out × in` weight of a block slot with every active LoRA folded in.
    fn effective(&self, block: usize, slot: &str) -> Mat {
        let w = self.base(&format!("blocks.{block}.{slot}.w"));
        let (o, i) = (w.shape()[0], w.shape()[1]);
        let mut eff: Mat = (0..o).map(|r| w.row(r).to_vec()).collect();
        let s = self.model.config.lora_alpha / self.model.config.lora_rank as f64;
        for set in [AdapterSet::Consistency, AdapterSet::Preference] {
            if !self.model.adapters.active.get(set) {
                continue;
            }
            let a = self.lora(set, &format!("blocks.{block}.{slot}.lora_a"));
            let b = self.lora(set, &format!("blocks.{block}.{slot}.lora_b"));
            for (r, row) in eff.iter_mut().enumerate() {
                for (c, e) in row.iter_mut().enumerate().take(i) {
                    *e += s * (0..a.shape()[0]).map(|k| b.at(r, k) * a.at(k, c)).sum::<f64>();
                }
            }
        }
        eff
    }
}

fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| w.iter().zip(b).map(|(wr, bi)| bi + wr.iter().zip(row).map(|(a, c)| a * c).sum::<f64>()).collect())
        .collect()
}

fn tensor_mat(t: &Tensor<f64>) -> Mat {
    (0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-6).sqrt()).collect()
}

fn modulate(x: &Mat, shift: &[f64], scale: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            layer_norm(row)
                .iter()
                .zip(shift.iter().zip(scale))
                .map(|(v, (sh, sc))| v * (1.0 + sc) + sh)
                .collect()
        })
        .collect()
}

fn head_rms(x: &Mat, heads: usize, g: &[f64]) -> Mat {
    let d = x[0].len() / heads;
    x.iter()
        .map(|row| {
            row.chunks(d)
                .flat_map(|h| {
                    let ms = h.iter().map(|v| v * v).sum::<f64>() / d as f64;
                    let ir = 1.0 / (ms + 1e-6).sqrt();
                    h.iter().zip(g).map(move |(v, gi)| v * ir * gi).collect::<Vec<_>>()
                })
                .collect()
        })
        .collect()
}

/// Independent forward of a one-block model with a cache given as `(K, V)`
/// matrices of the single block.
fn hand_forward(m: &Model<f64>, z: &Tensor<f64>, t: f64, cap: &[usize], refs: &[(Mat, Mat)]) -> Vec<f64> {
    let cfg = &m.config;
    assert_eq!(cfg.depth, 1);
    let w = Weights { model: m };
    let (g, p, ch, h) = (cfg.latent_grid, cfg.patch_size, cfg.latent_channels, cfg.hidden_dim);
    let gp = g / p;

    let text: Mat = cap
        .iter()
        .enumerate()
        .map(|(i, &tok)| {
            (0..h)
                .map(|c| w.base("text_embed").at(tok, c) + w.base("text_pos").at(i, c) + w.base("sample_embed").at(0, c))
                .collect()
        })
        .collect();
    let mut patches = Mat::new();
    for pr in 0..gp {
        for pc in 0..gp {
            let mut v = Vec::new();
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..ch {
                        v.push(z.data()[((pr * p + dy) * g + pc * p + dx) * ch + c]);
                    }
                }
            }
            patches.push(v);
        }
    }
    let mut img = linear(&patches, &tensor_mat(w.base("patch_in.w")), w.base("patch_in.b").data());
    for (i, row) in img.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += w.base("row_embed").at(i / gp, c) + w.base("col_embed").at(i % gp, c) + w.base("sample_embed").at(0, c);
        }
    }
    let mut x: Mat = text.into_iter().chain(img).collect();

    let feats = vec![timestep_features(t, cfg.time_freq_dim)];
    let e = linear(&feats, &tensor_mat(w.base("time.fc1.w")), w.base("time.fc1.b").data());
    let e: Mat = vec![e[0].iter().map(|&v| silu(v)).collect()];
    let cond = linear(&e, &tensor_mat(w.base("time.fc2.w")), w.base("time.fc2.b").data());
    let sc: Mat = vec![cond[0].iter().map(|&v| silu(v)).collect()];

    let m6 = linear(&sc, &w.effective(0, "mod"), w.base("blocks.0.mod.b").data())[0].clone();
    let part = |i: usize| &m6[i * h..(i + 1) * h];
    let hn = modulate(&x, part(0), part(1));
    let q = linear(&hn, &w.effective(0, "q"), w.base("blocks.0.q.b").data());
    let k = linear(&hn, &w.effective(0, "k"), w.base("blocks.0.k.b").data());
    let v = linear(&hn, &w.effective(0, "v"), w.base("blocks.0.v.b").data());
    let q = head_rms(&q, cfg.num_heads, w.base("blocks.0.q_norm").data());
    let k = head_rms(&k, cfg.num_heads, w.base("blocks.0.k_norm").data());
    let mut keys = k;
    let mut values = v;
    for (rk, rv) in refs {
        keys.extend(rk.iter().cloned());
        values.extend(rv.iter().cloned());
    }
    let att = dense_attention(&q, &keys, &values, cfg.num_heads);
    let o = linear(&att, &w.effective(0, "o"), w.base("blocks.0.o.b").data());
    for (xr, or) in x.iter_mut().zip(&o) {
        for ((xv, ov), gate) in xr.iter_mut().zip(or).zip(part(2)) {
            *xv += ov * gate;
        }
    }
    let hn = modulate(&x, part(3), part(4));
    let f = linear(&hn, &w.effective(0, "ff1"), w.base("blocks.0.ff1.b").data());
    let f: Mat = f.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let f = linear(&f, &w.effective(0, "ff2"), w.base("blocks.0.ff2.b").data());
    for (xr, fr) in x.iter_mut().zip(&f) {
        for ((xv, fv), gate) in xr.iter_mut().zip(fr).zip(part(5)) {
            *xv += fv * gate;
        }
    }

    let fm = linear(&sc, &tensor_mat(w.base("final.mod.w")), w.base("final.mod.b").data())[0].clone();
    let img: Mat = x[cfg.text_len..].to_vec();
    let y = modulate(&img, &fm[..h], &fm[h..]);
    let out = linear(&y, &tensor_mat(w.base("final.head.w")), w.base("final.head.b").data());
    let mut latent = vec![0.0; g * g * ch];
    for (tok, row) in out.iter().enumerate() {
        let (pr, pc) = (tok / gp, tok % gp);
        let mut it = row.iter();
        for dy in 0..p {
            for dx in 0..p {
                for c in 0..ch {
                    latent[((pr * p + dy) * g + pc * p + dx) * ch + c] = *it.next().unwrap();
                }
            }
        }
    }
    latent
}

#[test]
fn single_block_matches_hand_trace() {
    let cfg = ModelConfig { depth: 1, ..ModelConfig::tiny() };
    let mut m = adapted_model(cfg, 40);
    m.adapters.active = AdapterFlags::BOTH;
    let mut r = rng(41);
    let z = Tensor::randn(m.config.latent_shape(), 1.0, &mut r);
    let cap = caption(&m.config, &mut r);
    let t = 0.37;
    let got = m.predict_velocity(&z, t, &cap, None).unwrap();
    let expect = hand_forward(&m, &z, t, &cap, &[]);
    let diff = got.data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-5, "{diff}");

    let refs: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::randn(m.config.latent_shape(), 1.0, &mut r)).collect();
    let cache = m.reference_cache(&refs).unwrap();
    let kv: Vec<(Mat, Mat)> = cache.layers[0].iter().map(|(k, v)| (tensor_mat(k), tensor_mat(v))).collect();
    let got = m.predict_velocity(&z, t, &cap, Some(&cache)).unwrap();
    let expect = hand_forward(&m, &z, t, &cap, &kv);
    let diff = got.data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn forward_is_deterministic_and_finite() {
    let m = Model::<f32>::new(ModelConfig::default(), &mut rng(50)).unwrap();
    let mut r = rng(51);
    let z = Tensor::randn(m.config.latent_shape(), 1.0, &mut r);
    let cap = caption(&m.config, &mut r);
    let a = m.predict_velocity(&z, 0.9, &cap, None).unwrap();
    assert!(a.is_finite());
    assert_eq!(a, m.predict_velocity(&z, 0.9, &cap, None).unwrap());
}
