use crate::tensor::{Real, Result, Tape, TensorError, Var};

/// `x·Wᵀ + b + Σ s·(x·Aᵀ)·Bᵀ` over the given `(A, B)` pairs.
///
/// `W` is `out×in`, `A` is `r×in`, `B` is `out×r`.
pub fn lora_linear<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    pairs: &[(Var, Var)],
    scale: f64,
) -> Result<Var> {
    let mut y = tape.matmul_nt(x, weight)?;
    if let Some(b) = bias {
        y = tape.add_row(y, b)?;
    }
    let (out_dim, in_dim) = {
        let s = tape.shape(weight);
        (s[0], s[1])
    };
    for &(a, b) in pairs {
        let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != in_dim || sb[0] != out_dim || sa[0] != sb[1] {
            return Err(TensorError::contract(
                "lora_linear",
                format!("adapter A{sa:?} / B{sb:?} does not fit weight [{out_dim}, {in_dim}]"),
            ));
        }
        let down = tape.matmul_nt(x, a)?;
        let mut up = tape.matmul_nt(down, b)?;
        if scale != 1.0 {
            up = tape.scale(up, T::lit(scale));
        }
        y = tape.add(y, up)?;
    }
    Ok(y)
}

/// Multi-head attention of the target's queries over its own keys/values
/// extended with image-token keys/values of each reference.
///
/// `K̃ = [K_own] ⊕ K_1 ⊕ … ⊕ K_{N−1}` (likewise `Ṽ`), then per head
/// `softmax(Q·K̃ᵀ/√d)·Ṽ`. With no references this is plain self-attention.
pub fn gsa_attention<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    references: &[(Var, Var)],
    num_heads: usize,
) -> Result<Var> {
    let width = tape.value(q).cols();
    if width % num_heads != 0 {
        return Err(TensorError::contract(
            "gsa_attention",
            format!("width {width} not divisible by {num_heads} heads"),
        ));
    }
    for &(rk, rv) in std::iter::once(&(k, v)).chain(references) {
        if tape.value(rk).cols() != width || tape.value(rv).cols() != width {
            return Err(TensorError::contract(
                "gsa_attention",
                format!(
                    "key/value width {}/{} does not match query width {width}",
                    tape.value(rk).cols(),
                    tape.value(rv).cols()
                ),
            ));
        }
    }
    let (k_ext, v_ext) = if references.is_empty() {
        (k, v)
    } else {
        let mut ks = vec![k];
        let mut vs = vec![v];
        for &(rk, rv) in references {
            ks.push(rk);
            vs.push(rv);
        }
        (tape.concat_rows(&ks)?, tape.concat_rows(&vs)?)
    };
    let d = width / num_heads;
    let inv_sqrt_d = T::lit(1.0 / (d as f64).sqrt());
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (qh, kh, vh) = if num_heads == 1 {
            (q, k_ext, v_ext)
        } else {
            (
                tape.slice_cols(q, h * d, d)?,
                tape.slice_cols(k_ext, h * d, d)?,
                tape.slice_cols(v_ext, h * d, d)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, inv_sqrt_d);
        let probs = tape.softmax_rows(scores);
        heads.push(tape.matmul(probs, vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        tape.concat_cols(&heads)
    }
}

/// Sinusoidal features `[cos(t·1000·f_i), sin(t·1000·f_i)]` with
/// `f_i = 10000^(−i/half)`.
pub fn timestep_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t * 1000.0 * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}
