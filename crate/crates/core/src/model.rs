//! The full image-text encoder-decoder.

use lvqa_tensor::{Graph, Real, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{GenerationConfig, InputMode, ModelConfig};
use crate::error::{Error, Result};
use crate::fusion::{self, Branch, PAST_BRANCH_PARAMS};
use crate::params::ParamStore;
use crate::seq2seq::{self, Packing, Regularizer};
use crate::vision::{self, ImageTensor};

/// One model input: optional prior image, current image, instruction ids.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub past: Option<&'a ImageTensor>,
    pub current: &'a ImageTensor,
    pub instruction: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        vision::init_params(&config.vision, &mut rng, &mut params);
        fusion::init_params(&config, &mut rng, &mut params);
        seq2seq::init_params(&config, &mut rng, &mut params);
        Ok(Model { config, params })
    }

    /// Switches a single-image model to dual input, adding fresh time
    /// encodings and null-past row. All other parameters are kept as is.
    pub fn attach_past_branch(&mut self, seed: u64) {
        if self.config.mode == InputMode::Dual {
            return;
        }
        self.config.mode = InputMode::Dual;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fusion::init_past_branch(&self.config, &mut rng, &mut self.params);
    }

    /// Ties the current-image time encoding to the past one and freezes both.
    pub fn tie_time_encodings(&mut self) -> Result<()> {
        let past = self.params.get(fusion::TIME_PAST)?.data().to_vec();
        self.params.assign(fusion::TIME_CUR, &past)?;
        self.params.set_trainable(fusion::TIME_PAST, false)?;
        self.params.set_trainable(fusion::TIME_CUR, false)
    }

    /// Encoder input for a batch, one packed sequence per example.
    pub fn fused_input(&self, g: &mut Graph<T>, batch: &[Example]) -> Result<(Var, Packing)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let cfg = &self.config;
        let p = &self.params;
        let n = cfg.num_patches();
        let dual = cfg.mode == InputMode::Dual;
        let b = batch.len();
        let mut images: Vec<&ImageTensor> = batch.iter().map(|e| e.current).collect();
        let mut past_slot = vec![None; b];
        if dual {
            for (i, e) in batch.iter().enumerate() {
                if let Some(img) = e.past {
                    past_slot[i] = Some(images.len() - b);
                    images.push(img);
                }
            }
        }
        let feats = vision::encode_batch(g, p, &cfg.vision, &images)?;
        let proj = fusion::project_images(g, p, feats)?;
        let (cur, past) = if images.len() == b {
            (proj, None)
        } else {
            let cur = g.slice_rows(proj, 0, b * n)?;
            let past = g.slice_rows(proj, b * n, (images.len() - b) * n)?;
            (cur, Some(fusion::add_time(g, p, past, Branch::Past)?))
        };
        let cur = if dual { fusion::add_time(g, p, cur, Branch::Current)? } else { cur };
        let null = if dual && past_slot.iter().any(Option::is_none) {
            Some(fusion::null_past_block(g, p, n)?)
        } else {
            None
        };
        let texts: Vec<&[usize]> = batch.iter().map(|e| e.instruction).collect();
        let text = fusion::embed_texts(g, p, fusion::TOKENS, fusion::POS_TXT, &texts)?;

        let mut parts = Vec::with_capacity(3 * b);
        let mut lengths = Vec::with_capacity(b);
        let mut text_at = 0;
        for (i, e) in batch.iter().enumerate() {
            let cur_i = g.slice_rows(cur, i * n, n)?;
            let text_i = g.slice_rows(text, text_at, e.instruction.len())?;
            text_at += e.instruction.len();
            let past_i = if dual {
                Some(match (past_slot[i], past, null) {
                    (Some(k), Some(past), _) => g.slice_rows(past, k * n, n)?,
                    (_, _, Some(null)) => null,
                    _ => unreachable!("every dual example has a past or null block"),
                })
            } else {
                None
            };
            lengths.push(cfg.fused_len(e.instruction.len()));
            parts.extend(past_i);
            parts.push(cur_i);
            parts.push(text_i);
        }
        let fused = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        Ok((fused, Packing::new(lengths)))
    }

    /// Encoder output for a batch.
    pub fn memory(&self, g: &mut Graph<T>, batch: &[Example], reg: Option<&mut Regularizer>) -> Result<(Var, Packing)> {
        let (x, pack) = self.fused_input(g, batch)?;
        let m = seq2seq::encode(g, &self.params, &self.config, x, &pack, reg)?;
        Ok((m, pack))
    }

    /// Mean token cross-entropy of `targets` (each `[bos, .., eos]`).
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        batch: &[Example],
        targets: &[&[usize]],
        mut reg: Option<&mut Regularizer>,
    ) -> Result<Var> {
        if targets.len() != batch.len() {
            return Err(Error::Contract("one target per example required".into()));
        }
        let (m, pack) = self.memory(g, batch, reg.as_deref_mut())?;
        seq2seq::decoder_loss(g, &self.params, &self.config, m, &pack, targets, reg)
    }

    pub fn generate(&self, batch: &[Example], gen: &GenerationConfig) -> Result<Vec<Vec<usize>>> {
        let mut g = Graph::no_grad();
        let (m, pack) = self.memory(&mut g, batch, None)?;
        seq2seq::generate(&self.params, &self.config, g.value(m), &pack, gen)
    }

    /// Names of parameters that a single-image model lacks.
    pub fn past_branch_params() -> &'static [&'static str] {
        &PAST_BRANCH_PARAMS
    }
}

/// Parameter count implied by a configuration, computed without allocating.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let v = &cfg.vision;
    let conv = |o: usize, i: usize, k: usize| o * i * k * k;
    let mut vision = conv(v.stem_channels, v.in_channels, 3) + 2 * v.stem_channels;
    let mut prev = v.stem_channels;
    for &c in &v.stage_channels {
        vision += conv(c, prev, 3) + conv(c, c, 3) + conv(c, prev, 1) + 6 * c;
        prev = c;
    }
    vision += prev * v.embed_dim + v.embed_dim;
    let (d, f, n) = (cfg.d_model, cfg.ffn_width(), cfg.num_patches());
    let mut fusion = v.embed_dim * d + d + n * d + cfg.max_text_len * d + cfg.vocab_size * d;
    if cfg.mode == InputMode::Dual {
        fusion += 2 * n * d + d;
    }
    let attn = 4 * (d * d + d);
    let ffn = d * f + f + f * d + d;
    let norm = 2 * d;
    let encoder = cfg.encoder_layers * (2 * norm + attn + ffn) + norm;
    let decoder = cfg.max_text_len * d
        + cfg.decoder_layers * (3 * norm + 2 * attn + ffn)
        + norm
        + d * cfg.vocab_size
        + cfg.vocab_size;
    vision + fusion + encoder + decoder
}
