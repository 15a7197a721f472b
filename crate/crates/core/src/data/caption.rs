//! Integer captions over a fixed synthetic vocabulary.
//!
//! Layout: `[BOS, id_hi, id_lo, scene, style, EOS, PAD…]`, each field drawn
//! from its own token range so tokens are unambiguous by value.

/// Token that fills the null (unconditional) caption.
pub const NULL_TOKEN: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const PAD: usize = 3;
const ID_HI: usize = 4;
const ID_LO: usize = 20;
const SCENE: usize = 36;
const STYLE: usize = 52;

pub const MAX_IDENTITIES: usize = 256;
pub const MAX_SCENES: usize = 16;
pub const MAX_STYLES: usize = 8;
/// Smallest vocabulary that holds every caption token.
pub const CAPTION_VOCAB: usize = STYLE + MAX_STYLES;
/// Shortest caption length that holds every field.
pub const CAPTION_MIN_LEN: usize = 6;

pub fn null_caption(len: usize) -> Vec<usize> {
    vec![NULL_TOKEN; len]
}

pub fn encode_caption(identity_id: usize, scene_id: usize, style_id: usize, len: usize) -> Option<Vec<usize>> {
    if identity_id >= MAX_IDENTITIES || scene_id >= MAX_SCENES || style_id >= MAX_STYLES || len < CAPTION_MIN_LEN {
        return None;
    }
    let mut out = vec![
        BOS,
        ID_HI + identity_id / 16,
        ID_LO + identity_id % 16,
        SCENE + scene_id,
        STYLE + style_id,
        EOS,
    ];
    out.resize(len, PAD);
    Some(out)
}

/// Inverse of [`encode_caption`]: `(identity_id, scene_id, style_id)`.
pub fn decode_caption(tokens: &[usize]) -> Option<(usize, usize, usize)> {
    if tokens.len() < CAPTION_MIN_LEN || tokens[0] != BOS || tokens[5] != EOS {
        return None;
    }
    if tokens[6..].iter().any(|&t| t != PAD) {
        return None;
    }
    let field = |tok: usize, base: usize, n: usize| (base..base + n).contains(&tok).then(|| tok - base);
    let hi = field(tokens[1], ID_HI, 16)?;
    let lo = field(tokens[2], ID_LO, 16)?;
    let scene = field(tokens[3], SCENE, MAX_SCENES)?;
    let style = field(tokens[4], STYLE, MAX_STYLES)?;
    Some((hi * 16 + lo, scene, style))
}
