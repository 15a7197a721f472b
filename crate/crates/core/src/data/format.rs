//! Text-headed binary files for datasets and preference pools.
//!
//! Dataset:
//! ```text
//! GSAFLOW-DS v1
//! grid G channels C sequences S
//! <identity_id> <style_id> <frame count>      (per sequence)
//! <caption tokens>\n<G*G*C little-endian f32>  (per frame)
//! ```
//! Pools use the header `GSAFLOW-POOLS v1`, a `grid G channels C pools P`
//! line, then per pool `<scenario> <refs> <winners> <losers>`, the caption
//! line and the latents in that order.

use std::io::{BufRead, Write};

use super::{decode_caption, CharacterSpec, DataError, Renderer, StoryFrame, StorySequence};
use crate::dpo::PreferencePool;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &str = "GSAFLOW-DS v1";
pub const POOLS_MAGIC: &str = "GSAFLOW-POOLS v1";

fn bad(msg: impl Into<String>) -> DataError {
    DataError::Format(msg.into())
}

fn read_line(r: &mut impl BufRead) -> Result<String, DataError> {
    let mut s = String::new();
    if r.read_line(&mut s)? == 0 {
        return Err(bad("unexpected end of file"));
    }
    Ok(s.trim_end_matches('\n').to_string())
}

fn numbers(line: &str, n: usize, what: &str) -> Result<Vec<usize>, DataError> {
    let v: Vec<usize> = line
        .split_whitespace()
        .map(|w| w.parse().map_err(|_| bad(format!("{what}: `{w}` is not an integer"))))
        .collect::<Result<_, _>>()?;
    if v.len() != n {
        return Err(bad(format!("{what}: expected {n} fields, got {}", v.len())));
    }
    Ok(v)
}

fn dims_line(line: &str, count_key: &str) -> Result<(usize, usize, usize), DataError> {
    let w: Vec<&str> = line.split_whitespace().collect();
    if w.len() != 6 || w[0] != "grid" || w[2] != "channels" || w[4] != count_key {
        return Err(bad(format!("malformed dimensions line `{line}`")));
    }
    let p = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number `{s}`")));
    Ok((p(w[1])?, p(w[3])?, p(w[5])?))
}

fn write_latent(w: &mut impl Write, x: &Tensor<f32>) -> Result<(), DataError> {
    w.write_all(&x.to_le_f32_bytes())?;
    Ok(())
}

fn read_latent(r: &mut impl BufRead, shape: &[usize]) -> Result<Tensor<f32>, DataError> {
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Tensor::from_le_f32_bytes(shape.to_vec(), &buf).map_err(|e| bad(e.to_string()))
}

fn write_caption(w: &mut impl Write, caption: &[usize]) -> Result<(), DataError> {
    let s: Vec<String> = caption.iter().map(|t| t.to_string()).collect();
    writeln!(w, "{}", s.join(" "))?;
    Ok(())
}

fn read_caption(r: &mut impl BufRead) -> Result<Vec<usize>, DataError> {
    read_line(r)?
        .split_whitespace()
        .map(|w| w.parse().map_err(|_| bad(format!("caption token `{w}` is not an integer"))))
        .collect()
}

fn latent_shape(dataset: &[StorySequence]) -> Result<Vec<usize>, DataError> {
    let shape = dataset
        .iter()
        .flat_map(|s| s.frames.first())
        .map(|f| f.latent.shape().to_vec())
        .next()
        .ok_or_else(|| bad("empty dataset"))?;
    if shape.len() != 3 || shape[0] != shape[1] {
        return Err(bad(format!("latents must be square grid × channels, got {shape:?}")));
    }
    Ok(shape)
}

pub fn write_dataset(w: &mut impl Write, dataset: &[StorySequence]) -> Result<(), DataError> {
    let shape = latent_shape(dataset)?;
    writeln!(w, "{DATASET_MAGIC}")?;
    writeln!(w, "grid {} channels {} sequences {}", shape[0], shape[2], dataset.len())?;
    for seq in dataset {
        writeln!(w, "{} {} {}", seq.character.identity_id, seq.character.style_id, seq.frames.len())?;
        for f in &seq.frames {
            if f.latent.shape() != shape.as_slice() {
                return Err(bad("frames of differing shapes"));
            }
            write_caption(w, &f.caption)?;
            write_latent(w, &f.latent)?;
        }
    }
    Ok(())
}

/// Reads a dataset; identity codes are re-derived from `renderer`.
pub fn read_dataset(r: &mut impl BufRead, renderer: &Renderer) -> Result<Vec<StorySequence>, DataError> {
    if read_line(r)? != DATASET_MAGIC {
        return Err(bad(format!("missing `{DATASET_MAGIC}` header")));
    }
    let (g, c, n) = dims_line(&read_line(r)?, "sequences")?;
    let cfg = renderer.config();
    if (g, c) != (cfg.latent_grid, cfg.latent_channels) {
        return Err(bad(format!(
            "dataset latents are {g}×{g}×{c}, model expects {0}×{0}×{1}",
            cfg.latent_grid, cfg.latent_channels
        )));
    }
    let shape = [g, g, c];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let h = numbers(&read_line(r)?, 3, "sequence header")?;
        let (id, style, count) = (h[0], h[1], h[2]);
        if id >= super::MAX_IDENTITIES || style >= super::MAX_STYLES {
            return Err(bad(format!("identity {id} or style {style} out of range")));
        }
        let mut frames = Vec::with_capacity(count);
        for _ in 0..count {
            let caption = read_caption(r)?;
            let (cid, scene, cstyle) =
                decode_caption(&caption).ok_or_else(|| bad(format!("undecodable caption {caption:?}")))?;
            if (cid, cstyle) != (id, style) {
                return Err(bad(format!("caption {caption:?} disagrees with sequence ({id}, {style})")));
            }
            let latent = read_latent(r, &shape)?;
            frames.push(StoryFrame {
                latent,
                caption,
                scene_id: scene,
            });
        }
        out.push(StorySequence {
            character: CharacterSpec {
                identity_id: id,
                identity_code: renderer.identity_code(id).to_vec(),
                style_id: style,
            },
            frames,
        });
    }
    Ok(out)
}

pub fn write_pools(w: &mut impl Write, pools: &[PreferencePool]) -> Result<(), DataError> {
    let shape = pools
        .first()
        .map(|p| p.winners[0].shape().to_vec())
        .ok_or_else(|| bad("no pools"))?;
    writeln!(w, "{POOLS_MAGIC}")?;
    writeln!(w, "grid {} channels {} pools {}", shape[0], shape[2], pools.len())?;
    for p in pools {
        writeln!(w, "{} {} {} {}", p.scenario_id, p.references.len(), p.winners.len(), p.losers.len())?;
        write_caption(w, &p.condition)?;
        for x in p.references.iter().chain(&p.winners).chain(&p.losers) {
            if x.shape() != shape.as_slice() {
                return Err(bad("pool latents of differing shapes"));
            }
            write_latent(w, x)?;
        }
    }
    Ok(())
}

pub fn read_pools(r: &mut impl BufRead) -> Result<Vec<PreferencePool>, DataError> {
    if read_line(r)? != POOLS_MAGIC {
        return Err(bad(format!("missing `{POOLS_MAGIC}` header")));
    }
    let (g, c, n) = dims_line(&read_line(r)?, "pools")?;
    let shape = [g, g, c];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let h = numbers(&read_line(r)?, 4, "pool header")?;
        let condition = read_caption(r)?;
        let mut take = |k: usize| (0..k).map(|_| read_latent(r, &shape)).collect::<Result<Vec<_>, _>>();
        let references = take(h[1])?;
        let winners = take(h[2])?;
        let losers = take(h[3])?;
        if winners.is_empty() || losers.is_empty() {
            return Err(bad(format!("pool {} has no winners or no losers", h[0])));
        }
        out.push(PreferencePool {
            scenario_id: h[0],
            condition,
            references,
            winners,
            losers,
        });
    }
    Ok(out)
}
