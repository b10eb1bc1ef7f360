//! Projection, positional and time encodings, and assembly of the encoder
//! input sequence.

use lvqa_tensor::{Graph, Real, Tensor, TensorError, Var};
use rand_chacha::ChaCha8Rng;

use crate::config::{InputMode, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::text::TokenSequence;

pub const PROJ_W: &str = "fusion.proj.w";
pub const PROJ_B: &str = "fusion.proj.b";
pub const POS_IMG: &str = "fusion.pos_img";
pub const POS_TXT: &str = "fusion.pos_txt";
pub const TIME_PAST: &str = "fusion.time_past";
pub const TIME_CUR: &str = "fusion.time_cur";
pub const NULL_PAST: &str = "fusion.null_past";
pub const TOKENS: &str = "embed.tokens";

/// Parameters that exist only once a second image branch is attached.
pub const PAST_BRANCH_PARAMS: [&str; 3] = [TIME_PAST, TIME_CUR, NULL_PAST];

const ENCODING_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Past,
    Current,
}

impl Branch {
    fn time_param(self) -> &'static str {
        match self {
            Branch::Past => TIME_PAST,
            Branch::Current => TIME_CUR,
        }
    }
}

pub fn init_params<T: Real>(cfg: &ModelConfig, rng: &mut ChaCha8Rng, p: &mut ParamStore<T>) {
    let mut init = Init { rng };
    let (n, d) = (cfg.num_patches(), cfg.d_model);
    p.insert(PROJ_W, init.xavier(cfg.vision.embed_dim, d));
    p.insert(PROJ_B, Tensor::zeros(&[d]));
    p.insert(POS_IMG, init.normal(&[n, d], ENCODING_STD));
    p.insert(POS_TXT, init.normal(&[cfg.max_text_len, d], ENCODING_STD));
    p.insert(TOKENS, init.normal(&[cfg.vocab_size, d], ENCODING_STD));
    if cfg.mode == InputMode::Dual {
        init_past_branch(cfg, init.rng, p);
    }
}

/// Adds fresh time encodings and the null-past row.
pub fn init_past_branch<T: Real>(cfg: &ModelConfig, rng: &mut ChaCha8Rng, p: &mut ParamStore<T>) {
    let mut init = Init { rng };
    let (n, d) = (cfg.num_patches(), cfg.d_model);
    p.insert(TIME_PAST, init.normal(&[n, d], ENCODING_STD));
    p.insert(TIME_CUR, init.normal(&[n, d], ENCODING_STD));
    p.insert(NULL_PAST, init.normal(&[1, d], ENCODING_STD));
}

fn param<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str) -> Result<Var> {
    Ok(g.param(name, p.get(name)?))
}

/// Projects stacked image features `[M * N, E]` and adds the shared image
/// positional encoding to every block of `N` rows.
pub fn project_images<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, v: Var) -> Result<Var> {
    let w = param(g, p, PROJ_W)?;
    let b = param(g, p, PROJ_B)?;
    let pos = param(g, p, POS_IMG)?;
    if g.value(v).rank() != 2 || g.value(v).rows() % g.value(pos).rows() != 0 {
        return Err(TensorError::shape("project_images", g.shape(v), g.shape(pos)).into());
    }
    let y = g.linear(v, w, Some(b))?;
    Ok(g.add_broadcast(y, pos)?)
}

/// Adds the time encoding of `which` to every block of `N` rows.
pub fn add_time<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, x: Var, which: Branch) -> Result<Var> {
    let t = param(g, p, which.time_param())?;
    Ok(g.add_broadcast(x, t)?)
}

/// `projection(v) + image positions + time encoding of the branch`.
pub fn embed_image_branch<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, v: Var, which: Branch) -> Result<Var> {
    let x = project_images(g, p, v)?;
    add_time(g, p, x, which)
}

/// Placeholder past block for a sample without a prior image: the null row
/// repeated `N` times plus the past time encoding.
pub fn null_past_block<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, n: usize) -> Result<Var> {
    let row = param(g, p, NULL_PAST)?;
    let block = g.gather_rows(row, &vec![0; n])?;
    add_time(g, p, block, Branch::Past)
}

/// Token embeddings plus the matching prefix of text positions for several
/// sequences stacked back to back.
pub fn embed_texts<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    table: &str,
    positions: &str,
    seqs: &[&[usize]],
) -> Result<Var> {
    let tokens = param(g, p, table)?;
    let pos = param(g, p, positions)?;
    let limit = g.value(pos).rows();
    let mut ids = Vec::new();
    let mut at = Vec::new();
    for s in seqs {
        if s.len() > limit {
            return Err(Error::Contract(format!(
                "text of {} tokens exceeds the {limit}-token limit",
                s.len()
            )));
        }
        ids.extend_from_slice(s);
        at.extend(0..s.len());
    }
    let e = g.gather_rows(tokens, &ids)?;
    let pe = g.gather_rows(pos, &at)?;
    Ok(g.add(e, pe)?)
}

pub fn embed_text<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, tokens: &TokenSequence) -> Result<Var> {
    embed_texts(g, p, TOKENS, POS_TXT, &[&tokens.ids])
}

/// Concatenates `[past; current; text]` (past omitted in single-image mode).
pub fn fuse<T: Real>(g: &mut Graph<T>, past: Option<Var>, cur: Var, text: Var) -> Result<Var> {
    let parts: Vec<Var> = past.into_iter().chain([cur, text]).collect();
    let d = g.value(cur).cols();
    for &v in &parts {
        if g.value(v).rank() != 2 || g.value(v).cols() != d {
            return Err(TensorError::shape("fuse", g.shape(cur), g.shape(v)).into());
        }
    }
    Ok(g.concat_rows(&parts)?)
}
