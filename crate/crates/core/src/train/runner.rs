//! Dataset preparation and the training loop of one stage.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use lvqa_tensor::{Graph, Real};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{transfer, Checkpoint};
use super::optim::{clip_grad_norm, collect_grads, AdamW};
use super::stage::StageConfig;
use crate::config::{GenerationConfig, InputMode, ModelConfig};
use crate::data::synth::read_gray_image;
use crate::data::{read_jsonl, AnswerForm, Category, LongitudinalSample, SampleKind};
use crate::error::{Error, Result};
use crate::model::{Example, Model};
use crate::seq2seq::Regularizer;
use crate::text::Vocab;
use crate::vision::ImageTensor;

/// A sample with decoded images and token ids.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub kind: SampleKind,
    pub past: Option<Arc<ImageTensor>>,
    pub current: Arc<ImageTensor>,
    pub instruction: Vec<usize>,
    pub target: Vec<usize>,
    pub answer: String,
    pub category: Option<Category>,
    pub answer_form: Option<AnswerForm>,
}

impl Prepared {
    pub fn example(&self) -> Example<'_> {
        Example {
            past: self.past.as_deref(),
            current: &self.current,
            instruction: &self.instruction,
        }
    }
}

/// Loads each image file once.
#[derive(Debug)]
pub struct ImageCache {
    root: PathBuf,
    size: usize,
    images: HashMap<String, Arc<ImageTensor>>,
}

impl ImageCache {
    pub fn new(root: impl Into<PathBuf>, size: usize) -> Self {
        ImageCache {
            root: root.into(),
            size,
            images: HashMap::new(),
        }
    }

    pub fn get(&mut self, rel: &str) -> Result<Arc<ImageTensor>> {
        if let Some(img) = self.images.get(rel) {
            return Ok(img.clone());
        }
        let path = self.root.join(rel);
        let (side, pixels) = read_gray_image(&path)?;
        if side != self.size {
            return Err(Error::Data(format!(
                "{} is {side}px but the model expects {}px",
                path.display(),
                self.size
            )));
        }
        let img = Arc::new(ImageTensor::from_gray8(side, &pixels)?);
        self.images.insert(rel.to_string(), img.clone());
        Ok(img)
    }
}

/// Keeps the samples a stage trains on: stage 3 sees difference questions
/// only, stage 2 honours the data-source switches.
pub fn select_samples(cfg: &StageConfig, samples: Vec<LongitudinalSample>) -> Vec<LongitudinalSample> {
    let d = &cfg.data;
    samples
        .into_iter()
        .filter(|s| match (cfg.stage, s.kind) {
            (3, SampleKind::Vqa) => s.category == Some(Category::Difference),
            (3, _) => false,
            (2, SampleKind::Findings) => d.include_findings,
            (2, SampleKind::Impression) => d.include_impression,
            (2, SampleKind::Vqa) => d.include_diffqa_in_stage2,
            _ => true,
        })
        .collect()
}

pub fn prepare(samples: &[LongitudinalSample], vocab: &Vocab, images: &mut ImageCache) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                id: s.id.clone(),
                kind: s.kind,
                past: s.past_image.as_deref().map(|p| images.get(p)).transpose()?,
                current: images.get(&s.current_image)?,
                instruction: vocab.encode(&s.instruction).ids,
                target: vocab.encode(&s.target).ids,
                answer: s.target.clone(),
                category: s.category,
                answer_form: s.answer_form,
            })
        })
        .collect()
}

/// Reads, filters, caps and prepares one dataset file.
pub fn load_split(
    cfg: &StageConfig,
    path: &Path,
    cap: usize,
    vocab: &Vocab,
    images: &mut ImageCache,
) -> Result<Vec<Prepared>> {
    let mut rows = select_samples(cfg, read_jsonl(path)?);
    if cap > 0 {
        rows.truncate(cap);
    }
    prepare(&rows, vocab, images)
}

/// Model configuration for a stage with the vocabulary size filled in.
pub fn stage_model_config(cfg: &StageConfig, vocab: &Vocab) -> ModelConfig {
    let mut m = cfg.model.clone();
    m.vocab_size = vocab.len();
    m.mode = cfg.input_mode();
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,train_loss,valid_loss,lr\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.train_loss, r.valid_loss, r.lr));
    }
    s
}

pub struct EvalEvent<'a, T: Real> {
    pub step: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub model: &'a Model<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct StageOutcome<T: Real> {
    /// Parameters with the lowest validation loss seen.
    pub best: Checkpoint<T>,
    pub best_step: usize,
    pub best_valid: f64,
    pub log: Vec<LogRow>,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Token-weighted mean loss over `samples`, without regularization.
pub fn dataset_loss<T: Real>(model: &Model<T>, samples: &[Prepared], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<Example> = chunk.iter().map(Prepared::example).collect();
        let targets: Vec<&[usize]> = chunk.iter().map(|p| p.target.as_slice()).collect();
        let n: usize = chunk.iter().map(|p| p.target.len() - 1).sum();
        let mut g = Graph::no_grad();
        let loss = model.loss(&mut g, &batch, &targets, None)?;
        total += g.value(loss).item().to_f64().unwrap_or(f64::NAN) * n as f64;
        tokens += n;
    }
    Ok(total / tokens.max(1) as f64)
}

/// Builds the starting model of a stage, transferring `init` weights when
/// given.
pub fn initial_model<T: Real>(cfg: &StageConfig, model_cfg: &ModelConfig, init: Option<&Model<T>>) -> Result<Model<T>> {
    let mut model = match init {
        Some(src) => transfer(src, model_cfg, cfg.seed)?,
        None => Model::new(model_cfg.clone(), cfg.seed)?,
    };
    if cfg.tie_time_encodings && model.config.mode == InputMode::Dual {
        model.tie_time_encodings()?;
    }
    Ok(model)
}

/// Trains one stage with AdamW on shuffled batches, evaluating every
/// `eval_every` steps and stopping after `patience` steps without a new best
/// validation loss, or when `on_eval` asks to.
pub fn run_stage<T: Real>(
    cfg: &StageConfig,
    model: Model<T>,
    train: &[Prepared],
    valid: &[Prepared],
    on_eval: &mut dyn FnMut(&EvalEvent<T>) -> Control,
) -> Result<StageOutcome<T>> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if valid.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut pending = Vec::new();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, Checkpoint<T>)> = None;
    let mut stopped_early = false;
    let mut step = 0;

    while step < cfg.max_steps {
        let take = cfg.batch_size.min(train.len());
        let mut idx = Vec::with_capacity(take);
        while idx.len() < take {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<Example> = idx.iter().map(|&i| train[i].example()).collect();
        let targets: Vec<&[usize]> = idx.iter().map(|&i| train[i].target.as_slice()).collect();
        let mut g = Graph::new();
        let mut reg = Regularizer {
            rng: &mut rng,
            dropout: model.config.dropout,
            drop_path: model.config.stochastic_depth,
        };
        let loss = model.loss(&mut g, &batch, &targets, Some(&mut reg))?;
        let value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss became {value} at step {}", step + 1)));
        }
        g.backward(loss)?;
        let mut grads = collect_grads(&g);
        drop(g);
        clip_grad_norm(&mut grads, cfg.optimizer.clip_norm);
        opt.step(&mut model.params, &grads)?;
        step += 1;
        pending.push(value);

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let train_loss = pending.iter().sum::<f64>() / pending.len() as f64;
            pending.clear();
            let valid_loss = dataset_loss(&model, valid, cfg.batch_size)?;
            if !valid_loss.is_finite() {
                return Err(Error::Numeric(format!("validation loss became {valid_loss} at step {step}")));
            }
            log::info!("stage {} step {step}: train {train_loss:.4} valid {valid_loss:.4}", cfg.stage);
            log.push(LogRow { step, train_loss, valid_loss, lr: cfg.optimizer.lr });
            if best.as_ref().is_none_or(|(_, b, _)| valid_loss < *b) {
                let ckpt = Checkpoint::new(model.clone(), opt.clone(), step as u64, cfg.stage, rng.clone());
                best = Some((step, valid_loss, ckpt));
            }
            let event = EvalEvent { step, train_loss, valid_loss, model: &model };
            if on_eval(&event) == Control::Stop {
                stopped_early = true;
                break;
            }
            let best_step = best.as_ref().map_or(0, |b| b.0);
            if step - best_step >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_step, best_valid, best) = best.expect("at least one evaluation ran");
    Ok(StageOutcome { best, best_step, best_valid, log, steps: step, stopped_early })
}

/// Greedy (or configured) answers for `samples`, decoded to text.
pub fn predict<T: Real>(
    model: &Model<T>,
    vocab: &Vocab,
    samples: &[Prepared],
    gen: &GenerationConfig,
    batch_size: usize,
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<Example> = chunk.iter().map(Prepared::example).collect();
        for ids in model.generate(&batch, gen)? {
            out.push(vocab.decode(&ids)?);
        }
    }
    Ok(out)
}

/// Whether `answer` equals `reference` after lowercasing and trimming.
pub fn answers_match(answer: &str, reference: &str) -> bool {
    answer.trim().to_lowercase() == reference.trim().to_lowercase()
}
