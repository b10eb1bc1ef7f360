//! Pre-norm Transformer encoder and autoregressive decoder over packed
//! variable-length sequences.

use lvqa_tensor::{AttentionSegments, Graph, Real, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DecodeStrategy, GenerationConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::fusion::TOKENS;
use crate::params::{Init, ParamStore};
use crate::text::{BOS, EOS, PAD};

pub const DECODER_POS: &str = "decoder.pos";
pub const OUT_W: &str = "decoder.out.w";
pub const OUT_B: &str = "decoder.out.b";

const NORM_EPS: f64 = 1e-5;

/// Training-time noise: dropout on sublayer outputs and per-sample
/// stochastic depth of residual branches.
pub struct Regularizer<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub dropout: f64,
    pub drop_path: f64,
}

impl Regularizer<'_> {
    /// Multiplicative mask for a `[rows, width]` branch output where
    /// `owner[r]` is the sample of row `r`.
    fn mask<T: Real>(&mut self, owner: &[usize], samples: usize, width: usize, drop_path: f64) -> Vec<T> {
        let keep_path: Vec<f64> = (0..samples)
            .map(|_| {
                if drop_path > 0.0 && self.rng.random::<f64>() < drop_path {
                    0.0
                } else {
                    1.0 / (1.0 - drop_path)
                }
            })
            .collect();
        let scale = 1.0 / (1.0 - self.dropout);
        let mut out = Vec::with_capacity(owner.len() * width);
        for &s in owner {
            for _ in 0..width {
                let keep = if self.dropout > 0.0 && self.rng.random::<f64>() < self.dropout {
                    0.0
                } else {
                    scale
                };
                out.push(T::from_f64_lossy(keep * keep_path[s]));
            }
        }
        out
    }
}

/// Packed layout of a batch: sequence lengths and the sample owning each row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packing {
    pub lengths: Vec<usize>,
    pub owner: Vec<usize>,
}

impl Packing {
    pub fn new(lengths: Vec<usize>) -> Self {
        let owner = lengths
            .iter()
            .enumerate()
            .flat_map(|(i, &l)| std::iter::repeat_n(i, l))
            .collect();
        Packing { lengths, owner }
    }

    pub fn rows(&self) -> usize {
        self.owner.len()
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut at = 0;
        self.lengths
            .iter()
            .map(|&l| {
                let o = at;
                at += l;
                o
            })
            .collect()
    }
}

fn layer_rates(base: f64, layers: usize) -> Vec<f64> {
    if layers <= 1 {
        return vec![0.0; layers];
    }
    (0..layers).map(|l| base * l as f64 / (layers - 1) as f64).collect()
}

fn init_norm<T: Real>(p: &mut ParamStore<T>, prefix: &str, d: usize) {
    p.insert(format!("{prefix}.g"), Tensor::ones(&[d]));
    p.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
}

fn init_linear<T: Real>(init: &mut Init, p: &mut ParamStore<T>, prefix: &str, fan_in: usize, fan_out: usize) {
    p.insert(format!("{prefix}.w"), init.xavier(fan_in, fan_out));
    p.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

fn init_attention<T: Real>(init: &mut Init, p: &mut ParamStore<T>, prefix: &str, d: usize) {
    for m in ["q", "k", "v", "o"] {
        init_linear(init, p, &format!("{prefix}.{m}"), d, d);
    }
}

pub fn init_params<T: Real>(cfg: &ModelConfig, rng: &mut ChaCha8Rng, p: &mut ParamStore<T>) {
    let mut init = Init { rng };
    let (d, f) = (cfg.d_model, cfg.ffn_width());
    for l in 0..cfg.encoder_layers {
        let s = format!("encoder.{l}");
        init_norm(p, &format!("{s}.ln1"), d);
        init_attention(&mut init, p, &format!("{s}.attn"), d);
        init_norm(p, &format!("{s}.ln2"), d);
        init_linear(&mut init, p, &format!("{s}.ffn.in"), d, f);
        init_linear(&mut init, p, &format!("{s}.ffn.out"), f, d);
    }
    init_norm(p, "encoder.ln_f", d);
    p.insert(DECODER_POS, init.normal(&[cfg.max_text_len, d], 0.02));
    for l in 0..cfg.decoder_layers {
        let s = format!("decoder.{l}");
        init_norm(p, &format!("{s}.ln1"), d);
        init_attention(&mut init, p, &format!("{s}.self_attn"), d);
        init_norm(p, &format!("{s}.ln2"), d);
        init_attention(&mut init, p, &format!("{s}.cross_attn"), d);
        init_norm(p, &format!("{s}.ln3"), d);
        init_linear(&mut init, p, &format!("{s}.ffn.in"), d, f);
        init_linear(&mut init, p, &format!("{s}.ffn.out"), f, d);
    }
    init_norm(p, "decoder.ln_f", d);
    init_linear(&mut init, p, "decoder.out", d, cfg.vocab_size);
}

struct Ctx<'a, 'r, T: Real> {
    p: &'a ParamStore<T>,
    cfg: &'a ModelConfig,
    reg: Option<&'a mut Regularizer<'r>>,
}

impl<T: Real> Ctx<'_, '_, T> {
    fn param(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        Ok(g.param(name, self.p.get(name)?))
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(g, &format!("{prefix}.w"))?;
        let b = self.param(g, &format!("{prefix}.b"))?;
        Ok(g.linear(x, w, Some(b))?)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(g, &format!("{prefix}.g"))?;
        let beta = self.param(g, &format!("{prefix}.b"))?;
        Ok(g.layer_norm(x, gamma, beta, T::from_f64_lossy(NORM_EPS))?)
    }

    fn attention(
        &self,
        g: &mut Graph<T>,
        x: Var,
        memory: Var,
        prefix: &str,
        segs: &AttentionSegments,
        causal: bool,
    ) -> Result<Var> {
        let q = self.linear(g, x, &format!("{prefix}.q"))?;
        let k = self.linear(g, memory, &format!("{prefix}.k"))?;
        let v = self.linear(g, memory, &format!("{prefix}.v"))?;
        let a = g.attention(q, k, v, segs, self.cfg.num_heads(), causal)?;
        self.linear(g, a, &format!("{prefix}.o"))
    }

    fn ffn(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(g, x, &format!("{prefix}.in"))?;
        let h = g.gelu(h)?;
        self.linear(g, h, &format!("{prefix}.out"))
    }

    /// `x + noise(branch)` in training, `x + branch` otherwise.
    fn residual(&mut self, g: &mut Graph<T>, x: Var, branch: Var, pack: &Packing, drop_path: f64) -> Result<Var> {
        let branch = match self.reg.as_deref_mut() {
            Some(reg) if reg.dropout > 0.0 || drop_path > 0.0 => {
                let mask = reg.mask(&pack.owner, pack.lengths.len(), self.cfg.d_model, drop_path);
                g.mul_const(branch, mask)?
            }
            _ => branch,
        };
        Ok(g.add(x, branch)?)
    }

    fn drop_rates(&self, layers: usize) -> Vec<f64> {
        match &self.reg {
            Some(r) => layer_rates(r.drop_path, layers),
            None => vec![0.0; layers],
        }
    }
}

fn check_width<T: Real>(g: &Graph<T>, x: Var, pack: &Packing, d: usize) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != d || s[0] != pack.rows() {
        return Err(TensorError::shape("transformer", s, &[pack.rows(), d]).into());
    }
    Ok(())
}

/// Full bidirectional self-attention stack over each packed sequence.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    x: Var,
    pack: &Packing,
    reg: Option<&mut Regularizer>,
) -> Result<Var> {
    check_width(g, x, pack, cfg.d_model)?;
    let mut ctx = Ctx { p, cfg, reg };
    let segs = AttentionSegments::from_lengths(&pack.lengths);
    let rates = ctx.drop_rates(cfg.encoder_layers);
    let mut h = x;
    for (l, &rate) in rates.iter().enumerate() {
        let s = format!("encoder.{l}");
        let n = ctx.norm(g, h, &format!("{s}.ln1"))?;
        let a = ctx.attention(g, n, n, &format!("{s}.attn"), &segs, false)?;
        h = ctx.residual(g, h, a, pack, rate)?;
        let n = ctx.norm(g, h, &format!("{s}.ln2"))?;
        let f = ctx.ffn(g, n, &format!("{s}.ffn"))?;
        h = ctx.residual(g, h, f, pack, rate)?;
    }
    ctx.norm(g, h, "encoder.ln_f")
}

/// Decoder stack up to (not including) the final norm.
fn decoder_hidden<T: Real>(
    g: &mut Graph<T>,
    ctx: &mut Ctx<'_, '_, T>,
    memory: Var,
    cross_spans: &[(usize, usize)],
    prefixes: &[&[usize]],
) -> Result<(Var, Packing)> {
    let pack = Packing::new(prefixes.iter().map(|s| s.len()).collect());
    let x = crate::fusion::embed_texts(g, ctx.p, TOKENS, DECODER_POS, prefixes)?;
    let self_segs = AttentionSegments::from_lengths(&pack.lengths);
    let mut cross_segs = AttentionSegments::new();
    for ((&len, off), &(start, mlen)) in pack.lengths.iter().zip(pack.offsets()).zip(cross_spans) {
        cross_segs.push(off, len, start, mlen);
    }
    let rates = ctx.drop_rates(ctx.cfg.decoder_layers);
    let mut h = x;
    for (l, &rate) in rates.iter().enumerate() {
        let s = format!("decoder.{l}");
        let n = ctx.norm(g, h, &format!("{s}.ln1"))?;
        let a = ctx.attention(g, n, n, &format!("{s}.self_attn"), &self_segs, true)?;
        h = ctx.residual(g, h, a, &pack, rate)?;
        let n = ctx.norm(g, h, &format!("{s}.ln2"))?;
        let c = ctx.attention(g, n, memory, &format!("{s}.cross_attn"), &cross_segs, false)?;
        h = ctx.residual(g, h, c, &pack, rate)?;
        let n = ctx.norm(g, h, &format!("{s}.ln3"))?;
        let f = ctx.ffn(g, n, &format!("{s}.ffn"))?;
        h = ctx.residual(g, h, f, &pack, rate)?;
    }
    Ok((h, pack))
}

fn spans(pack: &Packing) -> Vec<(usize, usize)> {
    pack.offsets().into_iter().zip(pack.lengths.iter().copied()).collect()
}

/// Teacher-forced decoder logits `[sum(len), V]` for the packed prefixes.
pub fn decode<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    memory: Var,
    memory_pack: &Packing,
    prefixes: &[&[usize]],
    reg: Option<&mut Regularizer>,
) -> Result<Var> {
    if prefixes.len() != memory_pack.lengths.len() {
        return Err(Error::Contract("one decoder prefix per memory sequence required".into()));
    }
    check_width(g, memory, memory_pack, cfg.d_model)?;
    let mut ctx = Ctx { p, cfg, reg };
    let (h, _) = decoder_hidden(g, &mut ctx, memory, &spans(memory_pack), prefixes)?;
    let h = ctx.norm(g, h, "decoder.ln_f")?;
    ctx.linear(g, h, "decoder.out")
}

/// Splits each target into decoder input (all but the last id) and
/// prediction targets (all but the first id).
pub fn shift_targets(targets: &[&[usize]]) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let mut inputs = Vec::with_capacity(targets.len());
    let mut labels = Vec::new();
    for t in targets {
        if t.len() < 2 {
            return Err(Error::Contract("target needs at least a begin and an end marker".into()));
        }
        inputs.push(t[..t.len() - 1].to_vec());
        labels.extend_from_slice(&t[1..]);
    }
    Ok((inputs, labels))
}

/// Mean next-token cross-entropy over all non-pad target positions.
pub fn decoder_loss<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    memory: Var,
    memory_pack: &Packing,
    targets: &[&[usize]],
    reg: Option<&mut Regularizer>,
) -> Result<Var> {
    let (inputs, labels) = shift_targets(targets)?;
    let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
    let logits = decode(g, p, cfg, memory, memory_pack, &refs, reg)?;
    Ok(g.cross_entropy(logits, &labels, PAD)?)
}

/// Log-probabilities of one logit row.
pub fn log_softmax<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x.to_f64().unwrap_or(f64::NAN) - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x.to_f64().unwrap_or(f64::NAN) - lse).collect()
}

/// Per-position negative log-likelihoods of the shifted targets.
pub fn position_losses<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(r, &t)| -log_softmax(logits.row(r))[t])
        .collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn step_limit(cfg: &ModelConfig, gen: &GenerationConfig) -> usize {
    gen.max_len.min(cfg.max_text_len - 1)
}

/// Log-probabilities of the next token after each prefix.
fn next_token_logprobs<T: Real>(
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    memory: &Tensor<T>,
    memory_spans: &[(usize, usize)],
    prefixes: &[&[usize]],
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::no_grad();
    let m = g.constant(memory.clone());
    let mut ctx = Ctx { p, cfg, reg: None };
    let (h, pack) = decoder_hidden(&mut g, &mut ctx, m, memory_spans, prefixes)?;
    let last: Vec<usize> = pack.offsets().iter().zip(&pack.lengths).map(|(o, l)| o + l - 1).collect();
    let h = g.gather_rows(h, &last)?;
    let h = ctx.norm(&mut g, h, "decoder.ln_f")?;
    let logits = ctx.linear(&mut g, h, "decoder.out")?;
    let out = g.value(logits);
    Ok((0..last.len()).map(|r| log_softmax(out.row(r))).collect())
}

/// Generates one sequence per packed memory sequence. Outputs start with the
/// begin marker and end with the end marker unless the step limit is hit.
pub fn generate<T: Real>(
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    memory: &Tensor<T>,
    memory_pack: &Packing,
    gen: &GenerationConfig,
) -> Result<Vec<Vec<usize>>> {
    gen.validate()?;
    let spans = spans(memory_pack);
    match gen.strategy {
        DecodeStrategy::Greedy => greedy(p, cfg, memory, &spans, step_limit(cfg, gen)),
        DecodeStrategy::Beam { width } => spans
            .iter()
            .map(|&span| beam(p, cfg, memory, span, width, gen.length_penalty, step_limit(cfg, gen)))
            .collect(),
    }
}

fn greedy<T: Real>(
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    memory: &Tensor<T>,
    spans: &[(usize, usize)],
    steps: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; spans.len()];
    let mut active: Vec<usize> = (0..spans.len()).collect();
    for _ in 0..steps {
        if active.is_empty() {
            break;
        }
        let prefixes: Vec<&[usize]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
        let act_spans: Vec<(usize, usize)> = active.iter().map(|&i| spans[i]).collect();
        let lp = next_token_logprobs(p, cfg, memory, &act_spans, &prefixes)?;
        for (&i, row) in active.iter().zip(&lp) {
            seqs[i].push(argmax(row));
        }
        active.retain(|&i| *seqs[i].last().expect("non-empty") != EOS);
    }
    Ok(seqs)
}

#[derive(Clone)]
struct Hypothesis {
    ids: Vec<usize>,
    logp: f64,
}

impl Hypothesis {
    fn done(&self) -> bool {
        self.ids.last() == Some(&EOS)
    }

    fn score(&self, alpha: f64) -> f64 {
        let len = (self.ids.len() - 1).max(1) as f64;
        self.logp / len.powf(alpha)
    }
}

fn beam<T: Real>(
    p: &ParamStore<T>,
    cfg: &ModelConfig,
    memory: &Tensor<T>,
    span: (usize, usize),
    width: usize,
    alpha: f64,
    steps: usize,
) -> Result<Vec<usize>> {
    let mut beams = vec![Hypothesis { ids: vec![BOS], logp: 0.0 }];
    for _ in 0..steps {
        let open: Vec<&Hypothesis> = beams.iter().filter(|h| !h.done()).collect();
        if open.is_empty() {
            break;
        }
        let prefixes: Vec<&[usize]> = open.iter().map(|h| h.ids.as_slice()).collect();
        let lp = next_token_logprobs(p, cfg, memory, &vec![span; open.len()], &prefixes)?;
        let mut candidates: Vec<Hypothesis> = Vec::new();
        let mut open_iter = lp.iter();
        for h in &beams {
            if h.done() {
                candidates.push(h.clone());
                continue;
            }
            let row = open_iter.next().expect("one row per open hypothesis");
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for &t in order.iter().take(width) {
                let mut ids = h.ids.clone();
                ids.push(t);
                candidates.push(Hypothesis { ids, logp: h.logp + row[t] });
            }
        }
        // stable sort keeps enumeration order among equal scores
        candidates.sort_by(|a, b| b.score(alpha).total_cmp(&a.score(alpha)));
        candidates.truncate(width);
        beams = candidates;
    }
    Ok(beams.swap_remove(0).ids)
}
