//! Pretraining ablations: which stages run, and which inputs stage 2 sees.

use std::collections::HashMap;

use lvqa_tensor::Real;
use serde::{Deserialize, Serialize};

use super::runner::{initial_model, predict, run_stage, select_samples, stage_model_config, Control, ImageCache, Prepared, prepare};
use super::stage::StageConfig;
use crate::config::GenerationConfig;
use crate::data::{read_jsonl, LongitudinalSample};
use crate::error::{Error, Result};
use crate::metrics::{EvalPair, MetricReport};
use crate::model::Model;
use crate::text::Vocab;

/// Stage-2 input switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stage2Inputs {
    pub past_image: bool,
    pub findings: bool,
    pub impression: bool,
}

impl Stage2Inputs {
    pub const ALL: Stage2Inputs = Stage2Inputs { past_image: true, findings: true, impression: true };
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub row: String,
    pub stage1: bool,
    pub stage2: Option<Stage2Inputs>,
}

fn plan(row: &str, stage1: bool, stage2: Option<Stage2Inputs>) -> Plan {
    Plan { row: row.to_string(), stage1, stage2 }
}

/// Rows removing each pretraining stage.
pub fn pretraining_plans() -> Vec<Plan> {
    vec![
        plan("a", false, None),
        plan("b", true, None),
        plan("c", false, Some(Stage2Inputs::ALL)),
        plan("full", true, Some(Stage2Inputs::ALL)),
    ]
}

/// Rows varying the stage-2 inputs on top of stage-1 pretraining.
pub fn input_plans() -> Vec<Plan> {
    let with = |past_image, findings, impression| Some(Stage2Inputs { past_image, findings, impression });
    vec![
        plan("a", true, None),
        plan("b", true, with(false, true, true)),
        plan("c", true, with(true, false, true)),
        plan("d", true, with(true, true, false)),
        plan("full", true, Some(Stage2Inputs::ALL)),
    ]
}

pub fn plans_for_table(table: u8) -> Result<Vec<Plan>> {
    match table {
        2 => Ok(pretraining_plans()),
        3 => Ok(input_plans()),
        _ => Err(Error::Config(format!("no ablation table {table}; expected 2 or 3"))),
    }
}

/// Per-stage settings shared by every row. Dataset paths, preset and model
/// come from these configs; their seeds are replaced per run.
#[derive(Debug, Clone)]
pub struct AblationSetup {
    pub stages: [StageConfig; 3],
    pub test_file: String,
    pub generation: GenerationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub row: String,
    pub seed: u64,
    pub steps: Vec<usize>,
    pub metrics: MetricReport,
}

/// Loaded datasets and trained prefixes, shared across rows of one seed.
pub struct AblationRunner<T: Real> {
    setup: AblationSetup,
    vocab: Vocab,
    raw: HashMap<String, Vec<LongitudinalSample>>,
    images: ImageCache,
    test: Vec<Prepared>,
    trained: HashMap<String, (Model<T>, usize)>,
}

impl<T: Real> AblationRunner<T> {
    pub fn new(setup: AblationSetup) -> Result<Self> {
        let s3 = &setup.stages[2];
        let vocab = Vocab::load(&s3.vocab_path())?;
        let mut images = ImageCache::new(&s3.data.corpus_dir, s3.model.vision.image_size);
        let test_rows = select_samples(s3, read_jsonl(&s3.data.dataset_dir.join(&setup.test_file))?);
        let test = prepare(&test_rows, &vocab, &mut images)?;
        if test.is_empty() {
            return Err(Error::Data("test set is empty".into()));
        }
        Ok(AblationRunner { setup, vocab, raw: HashMap::new(), images, test, trained: HashMap::new() })
    }

    fn load(&mut self, cfg: &StageConfig, file: &str, cap: usize) -> Result<Vec<Prepared>> {
        let path = cfg.data.dataset_dir.join(file);
        let key = path.display().to_string();
        if !self.raw.contains_key(&key) {
            self.raw.insert(key.clone(), read_jsonl(&path)?);
        }
        let mut rows = select_samples(cfg, self.raw[&key].clone());
        if cap > 0 {
            rows.truncate(cap);
        }
        prepare(&rows, &self.vocab, &mut self.images)
    }

    fn stage(&mut self, cfg: StageConfig, init: Option<&Model<T>>) -> Result<(Model<T>, usize)> {
        let train = self.load(&cfg, &cfg.data.train.clone(), cfg.data.max_train)?;
        let valid = self.load(&cfg, &cfg.data.valid.clone(), cfg.data.max_valid)?;
        let model_cfg = stage_model_config(&cfg, &self.vocab);
        let model = initial_model(&cfg, &model_cfg, init)?;
        let out = run_stage(&cfg, model, &train, &valid, &mut |_| Control::Continue)?;
        log::info!("stage {} finished after {} steps (best at {})", cfg.stage, out.steps, out.best_step);
        Ok((out.best.model, out.steps))
    }

    fn schedule(&self, plan: &Plan, seed: u64) -> Vec<(String, StageConfig)> {
        let mut todo: Vec<(String, StageConfig)> = Vec::new();
        let mut key = format!("seed={seed}");
        let mut push = |tag: String, mut cfg: StageConfig| {
            key = format!("{key}/{tag}");
            cfg.seed = seed;
            todo.push((key.clone(), cfg));
        };
        if plan.stage1 {
            push("s1".into(), self.setup.stages[0].clone());
        }
        if let Some(inputs) = plan.stage2 {
            let mut c = self.setup.stages[1].clone();
            c.data.include_past_image = inputs.past_image;
            c.data.include_findings = inputs.findings;
            c.data.include_impression = inputs.impression;
            c.model.mode = c.input_mode();
            push(format!("s2{inputs:?}"), c);
        }
        push("s3".into(), self.setup.stages[2].clone());
        todo
    }

    /// Trains (or reuses) every stage of `plan` and scores the final model.
    pub fn run(&mut self, plan: &Plan, seed: u64) -> Result<RowResult> {
        let mut model: Option<Model<T>> = None;
        let mut steps = Vec::new();
        for (key, cfg) in self.schedule(plan, seed) {
            let (m, n) = match self.trained.get(&key) {
                Some(hit) => hit.clone(),
                None => {
                    let fresh = self.stage(cfg, model.as_ref())?;
                    self.trained.insert(key, fresh.clone());
                    fresh
                }
            };
            steps.push(n);
            model = Some(m);
        }
        let model = model.expect("stage 3 always runs");
        let metrics = self.score(&model)?;
        Ok(RowResult { row: plan.row.clone(), seed, steps, metrics })
    }

    /// Final model of a row that has already been run for `seed`.
    pub fn trained_model(&self, plan: &Plan, seed: u64) -> Option<&Model<T>> {
        let (key, _) = self.schedule(plan, seed).pop()?;
        self.trained.get(&key).map(|(m, _)| m)
    }

    pub fn test_set(&self) -> &[Prepared] {
        &self.test
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn score(&self, model: &Model<T>) -> Result<MetricReport> {
        let preds = predict(model, &self.vocab, &self.test, &self.setup.generation, 32)?;
        let pairs: Vec<EvalPair> = preds
            .iter()
            .zip(&self.test)
            .map(|(p, s)| EvalPair::new(p, &[&s.answer], s.answer_form))
            .collect();
        Ok(MetricReport::compute(&pairs))
    }

    /// Drops trained prefixes, e.g. between seeds.
    pub fn clear(&mut self) {
        self.trained.clear();
    }
}

/// Comparison table: one line per row and seed.
pub fn results_csv(results: &[RowResult]) -> String {
    let mut s = String::from("row,seed,bleu1,bleu2,bleu3,bleu4,meteor,rouge_l,cider,accuracy_all\n");
    for r in results {
        let m = &r.metrics;
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.row,
            r.seed,
            m.bleu1,
            m.bleu2,
            m.bleu3,
            m.bleu4,
            m.meteor,
            m.rouge_l,
            m.cider,
            m.accuracy_all.map_or(String::new(), |a| format!("{a:.3}"))
        ));
    }
    s
}
