//! Acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any fails. `LVQA_ACCEPTANCE=1,7,10` restricts the run to a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use lvqa_core::config::{GenerationConfig, InputMode, ModelConfig};
use lvqa_core::data::build::{build_datasets, BuildConfig};
use lvqa_core::data::synth::{generate_corpus, SynthConfig, NO_CHANGE};
use lvqa_core::fusion::{TIME_CUR, TIME_PAST};
use lvqa_core::metrics::{self, EvalPair};
use lvqa_core::model::param_count;
use lvqa_core::text::{BOS, EOS, NUM_SPECIALS};
use lvqa_core::train::ablation::{pretraining_plans, AblationRunner, AblationSetup, Plan, Stage2Inputs};
use lvqa_core::train::optim::collect_grads;
use lvqa_core::train::runner::{
    answers_match, initial_model, load_split, predict, stage_model_config, Control, EvalEvent, Prepared,
};
use lvqa_core::train::{run_stage, AdamW, AdamWConfig, ImageCache, StageConfig};
use lvqa_core::vision::ImageTensor;
use lvqa_core::{Example, Model, ParamStore, Vocab};
use lvqa_tensor::gradcheck::relative_error;
use lvqa_tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use walkdir::WalkDir;

#[path = "../../core/tests/oracle/metrics.rs"]
mod oracle;

#[path = "../../core/tests/support/hygiene.rs"]
mod hygiene;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

const CORPUS_SEED: u64 = 1;
const CORPUS_PATIENTS: usize = 200;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Corpus and ablation runs shared by several criteria.
struct Ctx {
    corpus: Option<(tempfile::TempDir, PathBuf)>,
    ablation: Option<Ablation>,
}

struct Ablation {
    runner: AblationRunner<f32>,
    /// (stage 3 only, stage 2 -> 3, stage 2 without past -> 3) test CIDEr per seed.
    cider: Vec<(f64, f64, f64)>,
}

impl Ctx {
    fn root(&mut self) -> Result<PathBuf, String> {
        if self.corpus.is_none() {
            let dir = tempfile::tempdir().map_err(fail)?;
            let root = dir.path().to_path_buf();
            let corpus = generate_corpus(&SynthConfig::new(CORPUS_SEED, CORPUS_PATIENTS)).map_err(fail)?;
            corpus.write(&root.join("corpus")).map_err(fail)?;
            build_datasets(&root.join("corpus"), &root.join("data"), &BuildConfig::default()).map_err(fail)?;
            self.corpus = Some((dir, root));
        }
        Ok(self.corpus.as_ref().unwrap().1.clone())
    }

    fn ablation(&mut self) -> Result<&Ablation, String> {
        if self.ablation.is_none() {
            let root = self.root()?;
            let setup = AblationSetup {
                stages: [
                    stage_config(&root, 1, &["max_steps=300", "optimizer.lr=0.001"])?,
                    stage_config(&root, 2, STAGE2)?,
                    stage_config(&root, 3, STAGE3)?,
                ],
                test_file: "stage3_test.jsonl".into(),
                generation: GenerationConfig::default(),
            };
            let mut runner = AblationRunner::<f32>::new(setup).map_err(fail)?;
            let mut cider = Vec::new();
            for seed in SEEDS {
                let t = Instant::now();
                let only3 = runner.run(&stage3_only(), seed).map_err(fail)?.metrics.cider;
                let with2 = runner.run(&stage2_then_3(), seed).map_err(fail)?.metrics.cider;
                let no_past = runner.run(&stage2_without_past(), seed).map_err(fail)?.metrics.cider;
                println!(
                    "    seed {seed}: test CIDEr stage3-only {only3:.4}, stage2->3 {with2:.4}, \
                     stage2(no past)->3 {no_past:.4} [{:.0?}]",
                    t.elapsed()
                );
                cider.push((only3, with2, no_past));
            }
            self.ablation = Some(Ablation { runner, cider });
        }
        Ok(self.ablation.as_ref().unwrap())
    }
}

const STAGE2: &[&str] = &["max_steps=2600", "optimizer.lr=0.001", "eval_every=100", "patience=100000"];
const STAGE3: &[&str] = &["max_steps=600", "optimizer.lr=0.001", "eval_every=50", "patience=200"];

fn stage3_only() -> Plan {
    pretraining_plans().into_iter().find(|p| p.row == "a").unwrap()
}

fn stage2_then_3() -> Plan {
    pretraining_plans().into_iter().find(|p| p.row == "c").unwrap()
}

fn stage2_without_past() -> Plan {
    Plan {
        row: "no-past".into(),
        stage1: false,
        stage2: Some(Stage2Inputs { past_image: false, ..Stage2Inputs::ALL }),
    }
}

fn stage_config(root: &Path, stage: u8, extra: &[&str]) -> Result<StageConfig, String> {
    let mut overrides = vec![
        "preset='desk'".to_string(),
        format!("data.corpus_dir='{}'", root.join("corpus").display()),
        format!("data.dataset_dir='{}'", root.join("data").display()),
    ];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    StageConfig::resolve(Some(stage), None, &overrides).map_err(fail)
}

fn random_image(size: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    ImageTensor::new(size, 1, (0..size * size).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn random_tokens(len: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut t = vec![BOS];
    t.extend((0..len).map(|_| rng.random_range(NUM_SPECIALS..vocab)));
    t.push(EOS);
    t
}

fn gradient_correctness() -> Check {
    let t = Instant::now();
    let cfg = ModelConfig::tiny(32);
    ensure(
        cfg.d_model == 16 && cfg.encoder_layers == 1 && cfg.decoder_layers == 1 && cfg.num_patches() == 4,
        || format!("tiny config is not D=16, 1+1 layers, N=4: {cfg:?}"),
    )?;
    let model = Model::<f64>::new(cfg.clone(), 17).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let size = cfg.vision.image_size;
    let imgs: Vec<ImageTensor> = (0..3).map(|_| random_image(size, &mut rng)).collect();
    let instr = [random_tokens(4, 32, &mut rng), random_tokens(3, 32, &mut rng)];
    let targets = [random_tokens(5, 32, &mut rng), random_tokens(3, 32, &mut rng)];
    let batch = [
        Example { past: Some(&imgs[0]), current: &imgs[1], instruction: &instr[0] },
        Example { past: None, current: &imgs[2], instruction: &instr[1] },
    ];
    let target_refs: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
    let loss_of = |m: &Model<f64>| -> Result<f64, String> {
        let mut g = Graph::no_grad();
        let l = m.loss(&mut g, &batch, &target_refs, None).map_err(fail)?;
        Ok(g.value(l).item())
    };

    let mut g = Graph::new();
    let loss = model.loss(&mut g, &batch, &target_refs, None).map_err(fail)?;
    g.backward(loss).map_err(fail)?;
    let grads: BTreeMap<String, Vec<f64>> = collect_grads(&g).into_iter().collect();
    drop(g);

    let mut names: Vec<&String> = grads.keys().collect();
    names.shuffle(&mut rng);
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for name in names.into_iter().take(12) {
        let j = rng.random_range(0..grads[name].len());
        let eval_at = |delta: f64| -> Result<f64, String> {
            let mut m = model.clone();
            m.params.get_mut(name).map_err(fail)?.data_mut()[j] += delta;
            loss_of(&m)
        };
        let numeric = (eval_at(h)? - eval_at(-h)?) / (2.0 * h);
        let err = relative_error(grads[name][j], numeric);
        if err >= worst.0 {
            worst = (err, format!("{name}[{j}]: analytic {:.6e} numeric {numeric:.6e}", grads[name][j]));
        }
        checked += 1;
    }
    let elapsed = t.elapsed();
    ensure(checked >= 10, || format!("only {checked} parameters checked"))?;
    ensure(worst.0 < 1e-3, || format!("max rel. err {:.3e} at {}", worst.0, worst.1))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:.1?}"))?;
    Ok(format!("{checked} parameters, max rel. err {:.2e} (< 1e-3), {elapsed:.1?} (< 60 s)", worst.0))
}

fn shape_fidelity() -> Check {
    let full = ModelConfig::full(1024);
    ensure(
        full.vision.image_size == 384 && full.vision.embed_dim == 1024 && full.d_model == 768,
        || format!("full preset dims differ: {full:?}"),
    )?;
    ensure(full.num_patches() == 576, || format!("grid gives {} patches", full.num_patches()))?;
    for n_t in [1, 9, 40, 100] {
        ensure(full.fused_len(n_t) == 2 * 576 + n_t, || format!("fused length {} for N_t={n_t}", full.fused_len(n_t)))?;
    }
    // Same geometry (384 px input, stride 16) with narrow layers, run for real.
    let mut narrow = ModelConfig::tiny(64);
    narrow.vision.image_size = 384;
    ensure(narrow.num_patches() == full.num_patches(), || "narrow model has a different grid".into())?;
    let model = Model::<f32>::new(narrow, 3).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = (random_image(384, &mut rng), random_image(384, &mut rng));
    let instr = random_tokens(7, 64, &mut rng);
    let mut g = Graph::no_grad();
    let (x, pack) = model
        .fused_input(&mut g, &[Example { past: Some(&a), current: &b, instruction: &instr }])
        .map_err(fail)?;
    let rows = g.shape(x)[0];
    ensure(rows == 2 * 576 + instr.len() && pack.lengths == [rows], || format!("fused input has {rows} rows"))?;
    Ok(format!(
        "fused rows 2*576+N_t (forward at 384 px: {rows} rows for N_t={}); full-size model has {} parameters, not allocated",
        instr.len(),
        param_count(&full)
    ))
}

fn overfit_oracle(ctx: &mut Ctx) -> Check {
    let t = Instant::now();
    let root = ctx.root()?;
    let cfg = stage_config(&root, 3, &["max_steps=2000", "eval_every=100", "patience=100000", "data.max_train=32"])?;
    ensure(cfg.model.d_model == 64 && cfg.model.encoder_layers == 2 && cfg.model.decoder_layers == 2, || {
        format!("desk config is not D=64 with 2+2 layers: {:?}", cfg.model)
    })?;
    let vocab = Vocab::load(&cfg.vocab_path()).map_err(fail)?;
    let mut images = ImageCache::new(&cfg.data.corpus_dir, cfg.model.vision.image_size);
    let train = load_split(&cfg, &cfg.train_path(), 32, &vocab, &mut images).map_err(fail)?;
    let valid = load_split(&cfg, &cfg.valid_path(), 0, &vocab, &mut images).map_err(fail)?;
    ensure(train.len() == 32, || format!("{} training samples", train.len()))?;
    let model = initial_model::<f32>(&cfg, &stage_model_config(&cfg, &vocab), None).map_err(fail)?;
    let gen = GenerationConfig::default();
    let mut reached: Option<(usize, Model<f32>)> = None;
    let mut last = 0.0;
    run_stage(&cfg, model, &train, &valid, &mut |e: &EvalEvent<f32>| {
        let preds = predict(e.model, &vocab, &train, &gen, 32).expect("generation");
        let hits = preds.iter().zip(&train).filter(|(p, s)| answers_match(p, &s.answer)).count();
        last = 100.0 * hits as f64 / train.len() as f64;
        if last >= 95.0 {
            reached = Some((e.step, e.model.clone()));
            Control::Stop
        } else {
            Control::Continue
        }
    })
    .map_err(fail)?;
    let elapsed = t.elapsed();
    let (step, model) = reached.ok_or_else(|| format!("exact match {last:.1}% after 2000 steps"))?;
    let preds = predict(&model, &vocab, &train, &gen, 32).map_err(fail)?;
    let pairs: Vec<EvalPair> =
        preds.iter().zip(&train).map(|(p, s)| EvalPair::new(p, &[&s.answer], s.answer_form)).collect();
    let em = metrics::exact_match(&pairs).2.unwrap_or(0.0);
    ensure(em >= 95.0, || format!("checkpoint exact match {em:.1}%"))?;
    ensure(elapsed < Duration::from_secs(600), || format!("took {elapsed:.0?}"))?;
    Ok(format!("exact match {em:.1}% (>= 95%) on its 32 training samples at step {step} (<= 2000), {elapsed:.0?} (< 10 min)"))
}

fn pipeline_directionality(ctx: &mut Ctx) -> Check {
    let ab = ctx.ablation()?;
    let wins = ab.cider.iter().filter(|(only3, with2, _)| with2 >= only3).count();
    let n = ab.cider.len() as f64;
    let mean = |f: fn(&(f64, f64, f64)) -> f64| ab.cider.iter().map(f).sum::<f64>() / n;
    let detail = format!(
        "stage2->3 >= stage3-only in {wins}/5 seeds (need 4); mean CIDEr {:.4} vs {:.4}",
        mean(|c| c.1),
        mean(|c| c.0)
    );
    ensure(wins >= 4, || detail.clone())?;
    Ok(detail)
}

fn past_image_directionality(ctx: &mut Ctx) -> Check {
    let ab = ctx.ablation()?;
    let wins = ab.cider.iter().filter(|(_, with_past, no_past)| with_past > no_past).count();
    let n = ab.cider.len() as f64;
    let detail = format!(
        "past image beats no past image in {wins}/5 seeds (need 4); mean CIDEr {:.4} vs {:.4}",
        ab.cider.iter().map(|c| c.1).sum::<f64>() / n,
        ab.cider.iter().map(|c| c.2).sum::<f64>() / n
    );
    ensure(wins >= 4, || detail.clone())?;
    Ok(detail)
}

fn answers(model: &Model<f32>, vocab: &Vocab, examples: &[Example]) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    for chunk in examples.chunks(32) {
        for ids in model.generate(chunk, &GenerationConfig::default()).map_err(fail)? {
            out.push(vocab.decode(&ids).map_err(fail)?);
        }
    }
    Ok(out)
}

fn swap_sensitivity(ctx: &mut Ctx) -> Result<String, String> {
    let ab = ctx.ablation()?;
    let runner = &ab.runner;
    let sensitive: Vec<&Prepared> = runner
        .test_set()
        .iter()
        .filter(|s| s.past.is_some() && !answers_match(&s.answer, NO_CHANGE))
        .collect();
    ensure(!sensitive.is_empty(), || "no direction-sensitive test answers".into())?;
    let (mut changed, mut total) = (0, 0);
    let mut per_seed = Vec::new();
    for seed in SEEDS {
        let model = runner
            .trained_model(&stage2_then_3(), seed)
            .ok_or_else(|| format!("no stage-3 model for seed {seed}"))?;
        let straight: Vec<Example> = sensitive
            .iter()
            .map(|s| Example { past: s.past.as_deref(), current: &s.current, instruction: &s.instruction })
            .collect();
        let swapped: Vec<Example> = sensitive
            .iter()
            .map(|s| Example { past: Some(&s.current), current: s.past.as_deref().unwrap(), instruction: &s.instruction })
            .collect();
        let a = answers(model, runner.vocab(), &straight)?;
        let b = answers(model, runner.vocab(), &swapped)?;
        let c = a.iter().zip(&b).filter(|(x, y)| !answers_match(x, y)).count();
        per_seed.push(format!("{c}/{}", a.len()));
        changed += c;
        total += a.len();
    }
    let rate = 100.0 * changed as f64 / total as f64;
    let detail = format!("swap changes {rate:.1}% of direction-sensitive answers (>= 50%; per seed {})", per_seed.join(" "));
    ensure(rate >= 50.0, || detail.clone())?;
    Ok(detail)
}

fn tied_block_symmetry(ctx: &mut Ctx) -> Result<String, String> {
    let root = ctx.root()?;
    let cfg = stage_config(&root, 3, &["max_steps=20", "eval_every=10", "tie_time_encodings=true", "optimizer.lr=0.001"])?;
    let vocab = Vocab::load(&cfg.vocab_path()).map_err(fail)?;
    let mut images = ImageCache::new(&cfg.data.corpus_dir, cfg.model.vision.image_size);
    let train = load_split(&cfg, &cfg.train_path(), 64, &vocab, &mut images).map_err(fail)?;
    let valid = load_split(&cfg, &cfg.valid_path(), 0, &vocab, &mut images).map_err(fail)?;
    let model = initial_model::<f32>(&cfg, &stage_model_config(&cfg, &vocab), None).map_err(fail)?;
    let out = run_stage(&cfg, model.clone(), &train, &valid, &mut |_| Control::Continue).map_err(fail)?;
    let trained = &out.best.model;
    ensure(trained.config.mode == InputMode::Dual, || "stage-3 model is not dual".into())?;
    let tp = trained.params.get(TIME_PAST).map_err(fail)?;
    ensure(tp.data() == trained.params.get(TIME_CUR).map_err(fail)?.data(), || "time encodings diverged".into())?;
    ensure(tp.data() == model.params.get(TIME_PAST).map_err(fail)?.data(), || "frozen time encoding moved".into())?;

    let n = trained.config.num_patches();
    let mut checked = 0;
    for s in train.iter().filter(|s| s.past.is_some()).take(8) {
        let past = s.past.as_deref().unwrap();
        let fused = |p: &ImageTensor, c: &ImageTensor| -> Result<Vec<f32>, String> {
            let mut g = Graph::no_grad();
            let (x, _) = trained
                .fused_input(&mut g, &[Example { past: Some(p), current: c, instruction: &s.instruction }])
                .map_err(fail)?;
            Ok(g.value(x).data().to_vec())
        };
        let (a, b) = (fused(past, &s.current)?, fused(&s.current, past)?);
        let d = trained.config.d_model;
        let block = |v: &[f32], k: usize| v[k * n * d..(k + 1) * n * d].to_vec();
        ensure(block(&a, 0) == block(&b, 1) && block(&a, 1) == block(&b, 0), || format!("{}: image blocks differ", s.id))?;
        ensure(a[2 * n * d..] == b[2 * n * d..], || format!("{}: text block differs", s.id))?;
        checked += 1;
    }
    ensure(checked > 0, || "no samples with a past image".into())?;
    Ok(format!("tied, frozen time encodings: fused input exactly block-swapped on {checked} samples after training"))
}

fn time_encoding(ctx: &mut Ctx) -> Check {
    let swap = swap_sensitivity(ctx)?;
    let sym = tied_block_symmetry(ctx)?;
    Ok(format!("{swap}; {sym}"))
}

fn metric_oracles() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    for seed in 0..4 {
        let pairs = oracle::random_pairs(seed, 50);
        for n in 1..=4 {
            let (x, y) = (metrics::bleu(&pairs, n), oracle::bleu(&pairs, n));
            ensure(close(x, y), || format!("BLEU-{n} seed {seed}: {x} vs oracle {y}"))?;
        }
        let checks = [
            ("ROUGE-L", metrics::rouge_l(&pairs), oracle::rouge_l(&pairs)),
            ("CIDEr", metrics::cider(&pairs), oracle::cider(&pairs)),
            ("METEOR", metrics::meteor_simple(&pairs), oracle::meteor(&pairs)),
        ];
        for (name, x, y) in checks {
            ensure(close(x, y), || format!("{name} seed {seed}: {x} vs oracle {y}"))?;
        }
    }
    let pair = |c: &str, r: &str| EvalPair::new(c, &[r], None);
    let exact = |name: &str, got: f64, want: f64| ensure(got == want, || format!("{name}: {got} != {want}"));
    let near = |name: &str, got: f64, want: f64| ensure((got - want).abs() < 1e-12, || format!("{name}: {got} != {want}"));
    let same = [pair("the cat sat on the mat", "the cat sat on the mat")];
    for n in 1..=4 {
        near("BLEU identity", metrics::bleu(&same, n), 1.0)?;
    }
    near("BLEU-1 'the cat' vs 'the cat sat'", metrics::bleu(&[pair("the cat", "the cat sat")], 1), (1.0f64 - 1.5).exp())?;
    exact("BLEU-1 disjoint", metrics::bleu(&[pair("a b c", "d e f")], 1), 0.0)?;
    exact("ROUGE-L identity", metrics::rouge_l(&[pair("a b c", "a b c")]), 1.0)?;
    exact("ROUGE-L disjoint", metrics::rouge_l(&[pair("a b", "c d")]), 0.0)?;
    let (p, r, b2) = (0.75, 1.0, 1.2f64 * 1.2);
    near("ROUGE-L 'a b c d' vs 'a c d'", metrics::rouge_l(&[pair("a b c d", "a c d")]), (1.0 + b2) * p * r / (r + b2 * p))?;
    near("METEOR identity", metrics::meteor_simple(&[pair("a b c d", "a b c d")]), 1.0 - 0.5 / 64.0)?;
    exact("METEOR disjoint", metrics::meteor_simple(&[pair("a b", "c d")]), 0.0)?;
    near("METEOR reversed", metrics::meteor_simple(&[pair("b a", "a b")]), 0.5)?;
    exact("CIDEr disjoint", metrics::cider(&[pair("a b", "c d"), pair("e", "f")]), 0.0)?;
    let pairs = oracle::random_pairs(99, 20);
    let doubled: Vec<EvalPair> = pairs.iter().chain(&pairs).cloned().collect();
    let (once, twice) = (metrics::cider_per_pair(&pairs), metrics::cider_per_pair(&doubled));
    for (i, s) in once.iter().enumerate() {
        ensure(close(*s, twice[i]) && close(*s, twice[i + pairs.len()]), || format!("CIDEr pair {i} changes under duplication"))?;
    }
    let closed = Some(lvqa_core::data::AnswerForm::Closed);
    let em = metrics::exact_match(&[EvalPair::new("yes", &["no"], closed), EvalPair::new("no", &["no"], closed)]);
    ensure(em == (None, Some(50.0), Some(50.0)), || format!("exact match {em:?}"))?;
    Ok("BLEU-1..4, ROUGE-L, CIDEr, METEOR match brute-force oracles on 4x50 pairs to 1e-9; worked examples reproduce".into())
}

fn data_hygiene() -> Check {
    for seed in 0..20 {
        catch_unwind(|| hygiene::check_corpus(seed)).map_err(|e| format!("seed {seed}: {}", panic_text(&e)))?;
    }
    Ok("prior-visit pairing, test exclusion and patient-disjoint splits hold for 20 corpus seeds".into())
}

fn lvqa(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lvqa"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(fail)?;
    ensure(out.status.success(), || format!("lvqa {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(dir).unwrap().display().to_string();
            (rel, std::fs::read(e.path()).unwrap_or_default())
        })
        .collect()
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(fail)?;
    let d = dir.path();
    std::fs::write(
        d.join("tiny.toml"),
        "preset = \"tiny\"\nmax_steps = 20\neval_every = 10\n[data]\ncorpus_dir = \"corpus_a\"\ndataset_dir = \"data_a\"\n",
    )
    .map_err(fail)?;
    let mut files = 0;
    for run in ["a", "b"] {
        lvqa(d, &["--seed", "3", "synth", "--patients", "20", "--image-size", "32", "--out", &format!("corpus_{run}")])?;
        lvqa(d, &["build", "--corpus", &format!("corpus_{run}"), "--out", &format!("data_{run}")])?;
        lvqa(d, &["--config", "tiny.toml", "--threads", "1", "train", "--stage", "3", "--out", &format!("train_{run}")])?;
    }
    for stem in ["corpus", "data", "train"] {
        let (a, b) = (tree(&d.join(format!("{stem}_a"))), tree(&d.join(format!("{stem}_b"))));
        ensure(a.contains_key("manifest.json"), || format!("{stem} has no manifest"))?;
        ensure(a == b, || format!("{stem} outputs differ between runs"))?;
        files += a.len();
    }
    Ok(format!("synth, build and train --threads 1 reproduce {files} files byte for byte, manifests included"))
}

fn optimizer() -> Check {
    let store = |x: f64| {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::from_f64(&[1], &[x]).unwrap());
        p
    };
    let cfg = |lr, weight_decay| AdamWConfig { lr, weight_decay, ..Default::default() };
    let value = |p: &ParamStore<f64>| p.get("w").unwrap().data()[0];
    let eps = AdamWConfig::default().eps;
    for g in [0.3, -2.5, 1e-3, 40.0] {
        let mut p = store(1.0);
        let mut opt = AdamW::new(cfg(1e-4, 0.0));
        opt.step(&mut p, &[("w".into(), vec![g])]).map_err(fail)?;
        let want = 1.0 - 1e-4 * g / (g.abs() + eps);
        ensure((value(&p) - want).abs() <= 1e-12, || format!("first step with g={g}: {} vs {want}", value(&p)))?;
    }
    let mut p = store(2.0);
    let mut opt = AdamW::new(cfg(1e-4, 0.01));
    for k in 1..=3 {
        opt.step(&mut p, &[("w".into(), vec![0.0])]).map_err(fail)?;
        let want = 2.0 * (1.0f64 - 1e-6).powi(k);
        ensure((value(&p) - want).abs() <= 1e-12, || format!("decay step {k}: {} vs {want}", value(&p)))?;
    }
    let mut p = store(0.7);
    let mut opt = AdamW::new(cfg(1e-3, 0.0));
    opt.step(&mut p, &[("w".into(), vec![0.0])]).map_err(fail)?;
    ensure(value(&p) == 0.7, || "zero gradient without decay moved the parameter".into())?;
    Ok("first-step -lr*g/(|g|+eps), decay-only p*(1-lr*wd)^k and zero-gradient identity match to 1e-12".into())
}

fn panic_text(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("LVQA_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut ctx = Ctx { corpus: None, ablation: None };
    let criteria: Vec<(u32, &str, Box<dyn Fn(&mut Ctx) -> Check>)> = vec![
        (1, "gradient correctness", Box::new(|_| gradient_correctness())),
        (2, "shape fidelity", Box::new(|_| shape_fidelity())),
        (3, "overfit oracle", Box::new(overfit_oracle)),
        (4, "pipeline directionality", Box::new(pipeline_directionality)),
        (5, "past-image ablation directionality", Box::new(past_image_directionality)),
        (6, "time-encoding property", Box::new(time_encoding)),
        (7, "metric oracle equivalence", Box::new(|_| metric_oracles())),
        (8, "data hygiene invariants", Box::new(|_| data_hygiene())),
        (9, "determinism", Box::new(|_| determinism())),
        (10, "optimizer unit correctness", Box::new(|_| optimizer())),
    ];
    let mut failed = 0;
    for (id, name, check) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut ctx))).unwrap_or_else(|e| Err(panic_text(&e)));
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("AC{id} {name}: PASS - {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("AC{id} {name}: FAIL - {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
