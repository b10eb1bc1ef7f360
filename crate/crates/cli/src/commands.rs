use std::path::{Path, PathBuf};

use clap::Args;
use lvqa_core::config::{DecodeStrategy, GenerationConfig};
use lvqa_core::data::build::{build_datasets, BuildConfig};
use lvqa_core::data::synth::{generate_corpus, SynthConfig};
use lvqa_core::data::{read_jsonl, write_jsonl, LongitudinalSample, Split};
use lvqa_core::metrics::{write_per_sample_csv, EvalPair, MetricReport};
use lvqa_core::train::ablation::{plans_for_table, results_csv, AblationRunner, AblationSetup, RowResult};
use lvqa_core::train::runner::{
    initial_model, load_split, log_csv, predict, prepare, stage_model_config, Control,
};
use lvqa_core::train::{run_stage, Checkpoint, ImageCache, StageConfig};
use lvqa_core::{Error, Model, Result, Vocab};
use lvqa_tensor::Real;
use serde::Serialize;

use crate::manifest::Manifest;
use crate::{Cli, Command, Precision};

#[derive(Debug, Clone, Args, Serialize)]
pub struct InferenceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory with the built datasets and vocab.txt.
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset file, relative to --data unless absolute.
    #[arg(long, default_value = "stage3_test.jsonl")]
    pub dataset: PathBuf,
    /// Corpus directory the image paths are relative to.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Beam width; greedy decoding when absent.
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub max_len: usize,
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    if cli.threads > 1 {
        log::info!("computation is single-threaded; --threads {} has no effect", cli.threads);
    }
    match cli.precision {
        Precision::F32 => dispatch::<f32>(cli),
        Precision::F64 => dispatch::<f64>(cli),
    }
}

fn dispatch<T: Real>(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { patients, out, min_visits, max_visits, image_size } => {
            let mut cfg = SynthConfig::new(cli.seed.unwrap_or(0), *patients);
            cfg.min_visits = *min_visits;
            cfg.max_visits = *max_visits;
            cfg.image_size = *image_size;
            synth(cli, cfg, out)
        }
        Command::Build { corpus, out, vocab_size, min_word_count } => {
            let cfg = BuildConfig { vocab_size: *vocab_size, min_word_count: *min_word_count };
            build(cli, corpus, out, cfg)
        }
        Command::Train { stage, init, out, overrides } => train::<T>(cli, *stage, init.as_deref(), out, overrides),
        Command::Generate { input, out } => generate::<T>(input, out).map(|_| ()),
        Command::Evaluate { input, out } => evaluate::<T>(cli, input, out),
        Command::Ablate { table, out, seeds, overrides } => ablate::<T>(cli, *table, out, seeds, overrides),
    }
}

/// Creates `dir`, refusing a non-empty one unless `--force` is set.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Data(format!("{} exists and is not a directory", dir.display())));
        }
        let occupied = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if occupied && !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn synth(cli: &Cli, cfg: SynthConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    prepare_out_dir(out, cli.force)?;
    let corpus = generate_corpus(&cfg)?;
    corpus.write(out)?;
    let mut m = Manifest::new("synth", &cfg);
    m.output("corpus", out)?;
    m.write(out)?;
    println!(
        "wrote {} studies, {} questions to {}",
        corpus.studies.len(),
        corpus.qa.len(),
        out.display()
    );
    Ok(())
}

fn build(cli: &Cli, corpus: &Path, out: &Path, cfg: BuildConfig) -> Result<()> {
    prepare_out_dir(out, cli.force)?;
    let summary = build_datasets(corpus, out, &cfg)?;
    let mut m = Manifest::new("build", &cfg);
    m.input("corpus", corpus)?;
    m.output("datasets", out)?;
    m.write(out)?;
    for (name, n) in &summary.files {
        println!("{name}: {n}");
    }
    println!("vocabulary: {} tokens", summary.vocab_size);
    Ok(())
}

fn resolve_stage(cli: &Cli, stage: Option<u8>, overrides: &[String]) -> Result<StageConfig> {
    let text = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut cfg = StageConfig::resolve(stage, text.as_deref(), overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn train<T: Real>(cli: &Cli, stage: Option<u8>, init: Option<&Path>, out: &Path, overrides: &[String]) -> Result<()> {
    let cfg = resolve_stage(cli, stage, overrides)?;
    prepare_out_dir(out, cli.force)?;
    let vocab = Vocab::load(&cfg.vocab_path())?;
    let mut images = ImageCache::new(&cfg.data.corpus_dir, cfg.model.vision.image_size);
    let train = load_split(&cfg, &cfg.train_path(), cfg.data.max_train, &vocab, &mut images)?;
    let valid = load_split(&cfg, &cfg.valid_path(), cfg.data.max_valid, &vocab, &mut images)?;
    let init_model = match init {
        Some(p) => Some(Checkpoint::<T>::load(p)?.model),
        None => {
            if cfg.stage > 1 {
                log::warn!("stage {} starts from scratch without --init", cfg.stage);
            }
            None
        }
    };
    let model_cfg = stage_model_config(&cfg, &vocab);
    let model = initial_model(&cfg, &model_cfg, init_model.as_ref())?;
    log::info!(
        "stage {}: {} train / {} valid samples, {} parameters",
        cfg.stage,
        train.len(),
        valid.len(),
        model.params.num_scalars()
    );
    let outcome = run_stage(&cfg, model, &train, &valid, &mut |_| Control::Continue)?;
    let ckpt = out.join("best.ckpt");
    outcome.best.save(&ckpt)?;
    let log_path = out.join("log.csv");
    std::fs::write(&log_path, log_csv(&outcome.log)).map_err(|e| Error::io(&log_path, e))?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;

    let mut m = Manifest::new("train", &cfg);
    m.input("train", &cfg.train_path())?;
    m.input("valid", &cfg.valid_path())?;
    m.input("vocab", &cfg.vocab_path())?;
    if let Some(p) = init {
        m.input("init", p)?;
    }
    m.output("checkpoint", &ckpt)?;
    m.output("log", &log_path)?;
    m.write(out)?;
    println!(
        "best validation loss {:.5} at step {} of {}; checkpoint {}",
        outcome.best_valid,
        outcome.best_step,
        outcome.steps,
        ckpt.display()
    );
    Ok(())
}

struct Generated {
    samples: Vec<LongitudinalSample>,
    predictions: Vec<String>,
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    id: &'a str,
    prediction: &'a str,
}

fn generation_config(args: &InferenceArgs) -> Result<GenerationConfig> {
    let gen = GenerationConfig {
        max_len: args.max_len,
        strategy: match args.beam {
            Some(width) => DecodeStrategy::Beam { width },
            None => DecodeStrategy::Greedy,
        },
        ..Default::default()
    };
    gen.validate()?;
    Ok(gen)
}

fn run_generation<T: Real>(args: &InferenceArgs) -> Result<Generated> {
    let gen = generation_config(args)?;
    let model: Model<T> = Checkpoint::<T>::load(&args.checkpoint)?.model;
    let vocab = Vocab::load(&args.data.join("vocab.txt"))?;
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Incompatible(vec![format!(
            "vocabulary has {} tokens but the checkpoint expects {}",
            vocab.len(),
            model.config.vocab_size
        )]));
    }
    let path = args.data.join(&args.dataset);
    let samples: Vec<LongitudinalSample> = read_jsonl(&path)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{} has no samples", path.display())));
    }
    if samples.iter().any(|s| s.split != Split::Test) {
        log::warn!("{} contains samples outside the test split", path.display());
    }
    let mut images = ImageCache::new(&args.corpus, model.config.vision.image_size);
    let prepared = prepare(&samples, &vocab, &mut images)?;
    let predictions = predict(&model, &vocab, &prepared, &gen, 16)?;
    Ok(Generated { samples, predictions })
}

fn write_predictions(path: &Path, g: &Generated) -> Result<()> {
    let rows: Vec<PredictionRow> = g
        .samples
        .iter()
        .zip(&g.predictions)
        .map(|(s, p)| PredictionRow { id: &s.id, prediction: p })
        .collect();
    write_jsonl(path, &rows)
}

fn generate<T: Real>(args: &InferenceArgs, out: &Path) -> Result<Generated> {
    let g = run_generation::<T>(args)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_predictions(out, &g)?;
    println!("wrote {} predictions to {}", g.predictions.len(), out.display());
    Ok(g)
}

fn evaluate<T: Real>(cli: &Cli, args: &InferenceArgs, out: &Path) -> Result<()> {
    prepare_out_dir(out, cli.force)?;
    let g = run_generation::<T>(args)?;
    let pred_path = out.join("predictions.jsonl");
    write_predictions(&pred_path, &g)?;
    let pairs: Vec<EvalPair> = g
        .samples
        .iter()
        .zip(&g.predictions)
        .map(|(s, p)| EvalPair::new(p, &[&s.target], s.answer_form))
        .collect();
    let report = MetricReport::compute(&pairs);
    let metrics_path = out.join("metrics.json");
    report.write_json(&metrics_path)?;
    let ids: Vec<String> = g.samples.iter().map(|s| s.id.clone()).collect();
    let refs: Vec<String> = g.samples.iter().map(|s| s.target.clone()).collect();
    let csv_path = out.join("per_sample.csv");
    write_per_sample_csv(&csv_path, &ids, &g.predictions, &refs, &pairs)?;

    let mut m = Manifest::new("evaluate", args);
    m.input("checkpoint", &args.checkpoint)?;
    m.input("dataset", &args.data.join(&args.dataset))?;
    m.output("predictions", &pred_path)?;
    m.output("metrics", &metrics_path)?;
    m.write(out)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?);
    Ok(())
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad seed `{s}` in --seeds")))
        })
        .collect()
}

/// Overrides that apply to `stage`: unprefixed ones and `stageN.` ones.
fn stage_overrides(overrides: &[String], stage: u8) -> Vec<String> {
    let own = format!("stage{stage}.");
    overrides
        .iter()
        .filter_map(|o| {
            if let Some(rest) = o.strip_prefix(&own) {
                Some(rest.to_string())
            } else if o.starts_with("stage") && o.as_bytes().get(6) == Some(&b'.') {
                None
            } else {
                Some(o.clone())
            }
        })
        .collect()
}

#[derive(Serialize)]
struct AblateSettings<'a> {
    table: u8,
    seeds: &'a [u64],
    precision: Precision,
    stages: &'a [StageConfig],
}

fn ablate<T: Real>(cli: &Cli, table: u8, out: &Path, seeds: &str, overrides: &[String]) -> Result<()> {
    let plans = plans_for_table(table)?;
    let seeds = parse_seeds(seeds)?;
    let stages = [1u8, 2, 3].map(|s| resolve_stage(cli, Some(s), &stage_overrides(overrides, s)));
    let [s1, s2, s3] = stages;
    let stages = [s1?, s2?, s3?];
    prepare_out_dir(out, cli.force)?;
    let setup = AblationSetup {
        stages: stages.clone(),
        test_file: "stage3_test.jsonl".into(),
        generation: GenerationConfig::default(),
    };
    let mut runner = AblationRunner::<T>::new(setup)?;
    let mut results: Vec<RowResult> = Vec::new();
    for &seed in &seeds {
        for plan in &plans {
            let r = runner.run(plan, seed)?;
            println!("row {} seed {seed}: CIDEr {:.4}, BLEU-4 {:.4}", r.row, r.metrics.cider, r.metrics.bleu4);
            results.push(r);
        }
        runner.clear();
    }
    let csv_path = out.join("comparison.csv");
    let mut csv = results_csv(&results);
    for plan in &plans {
        let rows: Vec<&RowResult> = results.iter().filter(|r| r.row == plan.row).collect();
        let mean = |f: fn(&RowResult) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
        let acc: Vec<f64> = rows.iter().filter_map(|r| r.metrics.accuracy_all).collect();
        let acc = if acc.is_empty() {
            String::new()
        } else {
            format!("{:.3}", acc.iter().sum::<f64>() / acc.len() as f64)
        };
        csv.push_str(&format!(
            "{},mean,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{acc}\n",
            plan.row,
            mean(|r| r.metrics.bleu1),
            mean(|r| r.metrics.bleu2),
            mean(|r| r.metrics.bleu3),
            mean(|r| r.metrics.bleu4),
            mean(|r| r.metrics.meteor),
            mean(|r| r.metrics.rouge_l),
            mean(|r| r.metrics.cider),
        ));
    }
    std::fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = out.join("results.json");
    let json = serde_json::to_string_pretty(&results).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;

    let settings = AblateSettings { table, seeds: &seeds, precision: cli.precision, stages: &stages };
    let mut m = Manifest::new("ablate", &settings);
    m.input("datasets", &stages[2].data.dataset_dir)?;
    m.output("comparison", &csv_path)?;
    m.write(out)?;
    print!("{csv}");
    Ok(())
}
